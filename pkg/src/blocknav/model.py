"""Navigation agent over instruction-annotated street graphs.

The agent keeps two recurrent tracks: a state encoder consuming pooled
visual features, turning-angle signals, and junction/action embeddings,
and a planner consuming attended text and visual features. Between them
sit a block-progress head (spatial feature + progress score) and a
sentence-relevance filter that masks token features before token-level
attention. Every module is switchable so the ablation grids in the
experiment runner toggle graph topology, not special cases inside ops.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .graph import Action
from .layers import (
    ModelParams,
    bidirectional_encode,
    bilstm_init,
    load_checkpoint,
    lstm_cell,
    lstm_init,
    lstm_zero_state,
    mha_init,
    multi_head_attention,
    save_checkpoint,
)
from .tensor import ShapeMismatch, Tensor, bce, ce_from_scores, concat

ACTION_START = 4  # previous-action id before the first step

NEG_INF = -np.inf


class EmptySentence(ValueError):
    """A sentence span covers zero tokens."""


class AllMasked(ValueError):
    """Every candidate action is masked."""


class LabelLengthMismatch(ValueError):
    """Supervision length differs from the episode length."""


@dataclass
class AgentConfig:
    """Dimensions and module switches.

    The boolean switches realign the differentiable graph itself; invalid
    combinations (a loss without its module) are rejected rather than
    silently ignored.
    """

    d: int = 64
    d_t: int = 128
    d_v: int = 16
    dim_timestep: int = 32
    dim_action: int = 16
    dim_junction: int = 16
    K: int = 3
    heads: int = 4
    num_bins: int = 8
    max_T: int = 40
    gamma_b: float = 1.0
    use_locating: bool = True            # spatial feature + progress score
    use_progress_loss: bool = True       # supervise the progress score
    global_progress_labels: bool = False  # t/T supervision instead of block fractions
    use_turn_signal: bool = True         # current turning angle into the state encoder
    use_turn_history: bool = True        # K-window turning-angle sum into the state encoder
    use_sentence_filter: bool = True     # sentence attention + relevance mask
    use_relevance_loss: bool = True      # supervise sentence relevance
    use_token_attn: bool = True          # token-level and visual cross attention
    use_spatial_in_planner: bool = True  # planner sees the spatial feature, not raw state
    baseline_mode: bool = False          # plain recurrent agent, mean-pooled instruction

    def __post_init__(self) -> None:
        if self.baseline_mode:
            self.use_locating = False
            self.use_progress_loss = False
            self.global_progress_labels = False
            self.use_turn_history = False
            self.use_sentence_filter = False
            self.use_relevance_loss = False
            self.use_token_attn = False
        if not self.use_locating:
            self.use_spatial_in_planner = False
        for name in ("d", "d_t", "d_v", "dim_timestep", "dim_action",
                     "dim_junction", "heads", "num_bins", "max_T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.gamma_b < 0:
            raise ValueError("gamma_b must be >= 0")
        if self.d % self.heads:
            raise ValueError("heads must divide d")
        if self.d_t % 2:
            raise ValueError("d_t must be even")
        if self.use_progress_loss and not self.use_locating:
            raise ValueError("progress loss needs the locating module")
        if self.global_progress_labels and not self.use_progress_loss:
            raise ValueError("global progress labels need the progress loss")
        if self.use_relevance_loss and not self.use_sentence_filter:
            raise ValueError("relevance loss needs the sentence filter")

    @property
    def attn_on(self) -> bool:
        return self.use_sentence_filter or self.use_token_attn

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepContext:
    """Per-episode recurrent state; never shared across episodes."""

    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor
    a_prev: int = ACTION_START
    t: int = 0

    @classmethod
    def fresh(cls, d: int) -> "StepContext":
        h1, c1 = lstm_zero_state(d)
        h2, c2 = lstm_zero_state(d)
        return cls(h1, c1, h2, c2)

    def advance(self, action: Action) -> None:
        self.a_prev = int(action)
        self.t += 1


@dataclass(frozen=True)
class ActionMenu:
    """Per-step candidates: normalized turn angle and legality per action."""

    angles: np.ndarray  # (4,)
    legal: np.ndarray   # (4,) bool


@dataclass
class InstructionEncoding:
    tokens: list
    spans: list
    I: Tensor | None = None           # (L, d_t) encoder outputs
    I_s: Tensor | None = None         # (N_s, d_t) span-pooled rows
    mean_embed: Tensor | None = None  # (1, d_t) pooled raw embeddings

    @property
    def n_sentences(self) -> int:
        return len(self.spans)


@dataclass
class StepOutput:
    o_t: Tensor
    z: Tensor
    action_scores: Tensor                  # (1, 4), illegal entries -inf
    o_p: Tensor | None = None
    progress: Tensor | None = None         # (1, 1)
    I_s_hat: Tensor | None = None
    relevance: Tensor | None = None        # (N_s, 1)
    mask_rows: Tensor | None = None        # (L, 1) span-repeated relevance
    I_attn: Tensor | None = None
    x_attn: Tensor | None = None
    attn_sent: np.ndarray | None = None    # (heads, N_s)
    attn_tok: np.ndarray | None = None     # (heads, L)
    attn_vis: np.ndarray | None = None     # (heads, B)

    @property
    def e_p(self) -> float | None:
        return None if self.progress is None else self.progress.item()

    @property
    def r(self) -> np.ndarray | None:
        return None if self.relevance is None else self.relevance.data[:, 0].copy()

    @property
    def M(self) -> np.ndarray | None:
        return None if self.mask_rows is None else self.mask_rows.data[:, 0].copy()


@dataclass
class Losses:
    action: Tensor
    progress: Tensor
    relevance: Tensor
    total: Tensor


def act_greedy(action_scores) -> Action:
    """Highest-scoring legal action; ties resolve to the lowest ordinal
    (FORWARD < LEFT < RIGHT < STOP)."""
    scores = action_scores.data if isinstance(action_scores, Tensor) else np.asarray(action_scores)
    flat = scores.reshape(-1)
    if not np.isfinite(flat).any():
        raise AllMasked("no candidate action has a finite score")
    return Action(int(np.argmax(flat)))  # argmax takes the first maximum


class Agent:
    """Config + parameters + the per-step forward pass."""

    def __init__(self, config: AgentConfig, vocab_size: int, seed: int = 0):
        if vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        self.config = config
        self.vocab_size = vocab_size
        self.params = ModelParams()
        self._build(np.random.default_rng([seed, 0xA9E]))

    # ------------------------------------------------------------ setup

    def _build(self, rng: np.random.Generator) -> None:
        c = self.config
        p = self.params
        if c.attn_on:
            bilstm_init(p, "text", self.vocab_size, c.d_t, rng)
        else:
            p.add("text.embed", (self.vocab_size, c.d_t), rng)
        state_in = c.d_v + int(c.use_turn_signal) + int(c.use_turn_history) \
            + c.dim_junction + c.dim_action
        lstm_init(p, "state", state_in, c.d, rng)
        p.add("embed.action", (5, c.dim_action), rng)
        p.add("embed.junction", (c.num_bins + 1, c.dim_junction), rng)
        p.add("embed.timestep", (c.max_T, c.dim_timestep), rng)
        if c.use_locating:
            p.add("locate.w_b", (c.d, c.d), rng)
            p.add("locate.w_p", (c.d, 1), rng)
        if c.use_sentence_filter:
            mha_init(p, "assoc.sent", c.d, c.d_t, c.d, rng)
            p.add("assoc.w_query", (c.d, c.d), rng)
            p.add("assoc.w_keys", (c.d_t, c.d), rng)
            p.add("assoc.w_score", (c.d, 1), rng)
        if c.use_token_attn:
            mha_init(p, "assoc.tok", c.d, c.d_t, c.d, rng)
        if c.attn_on:
            mha_init(p, "vis", c.d, c.d_v, c.d, rng)
        text_w = c.d if c.attn_on else c.d_t
        vis_w = c.d if c.attn_on else c.d_v
        plan_in = vis_w + text_w + c.d + c.d + c.dim_timestep
        lstm_init(p, "plan", plan_in, c.d, rng)
        # one (d+1)-weight column per action; a shared column would tie
        # FORWARD and STOP scores (both have turn angle 0) forever
        p.add("plan.w_act", (c.d + 1, 4), rng)

    def fresh_context(self) -> StepContext:
        return StepContext.fresh(self.config.d)

    # ------------------------------------------------------------ instruction

    def encode_instruction(self, tokens, sentence_spans) -> InstructionEncoding:
        spans = [(int(a), int(b)) for a, b in sentence_spans]
        pos = 0
        for a, b in spans:
            if b <= a:
                raise EmptySentence(f"span ({a}, {b}) covers no tokens")
            if a != pos:
                raise ShapeMismatch("sentence spans must tile the token sequence")
            pos = b
        if pos != len(tokens):
            raise ShapeMismatch("sentence spans must cover every token")
        enc = InstructionEncoding(list(tokens), spans)
        if self.config.attn_on:
            enc.I = bidirectional_encode(self.params, "text", tokens)
            rows = [enc.I.narrow(0, a, b - a).mean(axis=0, keepdims=True) for a, b in spans]
            enc.I_s = concat(rows, axis=0)
        else:
            emb = self.params["text.embed"].gather_rows(list(tokens))
            enc.mean_embed = emb.mean(axis=0, keepdims=True)
        return enc

    # ------------------------------------------------------------ step pieces

    def encode_state(self, ctx: StepContext, x_pooled: Tensor, g_c: float,
                     g_l: float, junction_count: int) -> Tensor:
        c = self.config
        parts = [x_pooled]
        if c.use_turn_signal:
            parts.append(Tensor([[g_c]]))
        if c.use_turn_history:
            parts.append(Tensor([[g_l]]))
        j = min(int(junction_count), c.num_bins)
        parts.append(self.params["embed.junction"].gather_rows([j]))
        parts.append(self.params["embed.action"].gather_rows([ctx.a_prev]))
        h, cell = lstm_cell(self.params, "state", concat(parts, axis=1), (ctx.h1, ctx.c1))
        ctx.h1, ctx.c1 = h, cell
        return h

    def locate(self, o_t: Tensor) -> tuple[Tensor, Tensor]:
        o_p = (o_t @ self.params["locate.w_b"]).relu()
        e_p = (o_p @ self.params["locate.w_p"]).sigmoid()
        return o_p, e_p

    def associate(self, o_sp: Tensor, enc: InstructionEncoding):
        """Sentence-level relevance: attended sentence feature, per-sentence
        scores, and the span-repeated token mask."""
        p = self.params
        heads = self.config.heads
        I_s_hat, attn_sent = multi_head_attention(p, "assoc.sent", o_sp, enc.I_s, heads)
        q = (I_s_hat @ p["assoc.w_query"]).relu()         # (1, d), broadcast below
        k = (enc.I_s @ p["assoc.w_keys"]).relu()          # (N_s, d)
        r = ((q * k) @ p["assoc.w_score"]).sigmoid()      # (N_s, 1)
        mask_rows = concat(
            [r.narrow(0, i, 1) * np.ones((b - a, 1)) for i, (a, b) in enumerate(enc.spans)],
            axis=0,
        )
        I_m = enc.I * mask_rows
        return I_s_hat, r, mask_rows, I_m, attn_sent

    def attend_visual(self, query: Tensor, x_tokens: Tensor) -> tuple[Tensor, np.ndarray]:
        return multi_head_attention(self.params, "vis", query, x_tokens, self.config.heads)

    def plan(self, ctx: StepContext, x_feat: Tensor, text_feat: Tensor,
             o_t: Tensor, o_sp: Tensor, menu: ActionMenu) -> tuple[Tensor, Tensor]:
        c = self.config
        p = self.params
        t_emb = p["embed.timestep"].gather_rows([min(ctx.t, c.max_T - 1)])
        inp = concat([x_feat, text_feat, o_t, o_sp, t_emb], axis=1)
        z, cell = lstm_cell(p, "plan", inp, (ctx.h2, ctx.c2))
        ctx.h2, ctx.c2 = z, cell
        # per action a: W_a^T [z (+) g^a], split into the z term plus the
        # action's angle coordinate
        w_act = p["plan.w_act"]
        base = z @ w_act.narrow(0, 0, c.d)                 # (1, 4)
        angle_w = w_act.narrow(0, c.d, 1)                  # (1, 4)
        scores = base + Tensor(menu.angles[None, :]) * angle_w
        scores = scores.mask_fill(~menu.legal[None, :], NEG_INF)
        return z, scores

    # ------------------------------------------------------------ full step

    def step(self, ctx: StepContext, enc: InstructionEncoding, obs: np.ndarray,
             g_c: float, g_l: float, junction_count: int, menu: ActionMenu) -> StepOutput:
        c = self.config
        x_pooled = Tensor(obs.mean(axis=0, keepdims=True))
        o_t = self.encode_state(ctx, x_pooled, g_c, g_l, junction_count)
        o_p = progress = None
        if c.use_locating:
            o_p, progress = self.locate(o_t)
        o_sp = o_p if c.use_spatial_in_planner else o_t

        I_s_hat = relevance = mask_rows = I_attn = None
        attn_sent = attn_tok = attn_vis = None
        if c.use_sentence_filter:
            I_s_hat, relevance, mask_rows, I_m, attn_sent = self.associate(o_sp, enc)
        elif c.use_token_attn:
            I_m = enc.I
        if c.use_token_attn:
            I_attn, attn_tok = multi_head_attention(
                self.params, "assoc.tok", o_sp, I_m, c.heads)
            text_feat = I_attn
        elif c.use_sentence_filter:
            text_feat = I_s_hat
        else:
            text_feat = enc.mean_embed
        if c.attn_on:
            x_feat, attn_vis = self.attend_visual(text_feat, Tensor(obs))
        else:
            x_feat = x_pooled
        z, scores = self.plan(ctx, x_feat, text_feat, o_t, o_sp, menu)
        return StepOutput(
            o_t=o_t, z=z, action_scores=scores, o_p=o_p, progress=progress,
            I_s_hat=I_s_hat, relevance=relevance, mask_rows=mask_rows,
            I_attn=I_attn, x_attn=x_feat if c.attn_on else None,
            attn_sent=attn_sent, attn_tok=attn_tok, attn_vis=attn_vis,
        )

    # ------------------------------------------------------------ losses

    def compute_losses(self, outputs: list[StepOutput], gold_actions,
                       progress_labels=None, relevance_labels=None) -> Losses:
        c = self.config
        T = len(outputs)
        if T == 0:
            raise LabelLengthMismatch("empty episode")
        if len(gold_actions) != T:
            raise LabelLengthMismatch(f"{len(gold_actions)} actions for {T} steps")
        zero = Tensor(np.zeros(()))
        score_rows = concat([o.action_scores for o in outputs], axis=0)
        l_action = ce_from_scores(score_rows, [int(a) for a in gold_actions])
        l_progress = zero
        if c.use_progress_loss:
            if c.global_progress_labels:
                labels = np.arange(T, dtype=np.float64)[:, None] / T
            else:
                if progress_labels is None or len(progress_labels) != T:
                    raise LabelLengthMismatch("progress labels must cover every step")
                labels = np.asarray(progress_labels, dtype=np.float64)[:, None]
            preds = concat([o.progress for o in outputs], axis=0)
            l_progress = ((preds - Tensor(labels)) ** 2).sum()
        l_relevance = zero
        if c.use_relevance_loss:
            if relevance_labels is None or len(relevance_labels) != T:
                raise LabelLengthMismatch("relevance labels must cover every step")
            r_rows = concat([o.relevance.transpose() for o in outputs], axis=0)
            l_relevance = c.gamma_b * bce(r_rows, np.asarray(relevance_labels, dtype=np.float64))
        return Losses(l_action, l_progress, l_relevance,
                      l_action + l_progress + l_relevance)

    # ------------------------------------------------------------ io

    def describe(self) -> str:
        cfg = json.dumps(self.config.to_dict(), indent=2, sort_keys=True)
        return f"config:\n{cfg}\nvocab_size: {self.vocab_size}\nparameters:\n{self.params.describe()}"

    def save(self, path: str) -> None:
        meta = json.dumps(
            {"config": self.config.to_dict(), "vocab_size": self.vocab_size},
            sort_keys=True,
        ).encode("utf-8")
        save_checkpoint(path, self.params, metadata=meta)

    @classmethod
    def load(cls, path: str) -> "Agent":
        arrays, meta = load_checkpoint(path)
        blob = json.loads(meta.decode("utf-8"))
        agent = cls(AgentConfig.from_dict(blob["config"]), int(blob["vocab_size"]))
        agent.params.load_state(arrays)
        return agent
