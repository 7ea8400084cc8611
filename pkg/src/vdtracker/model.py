"""The full video-dialog model: encoder over the combined sequence, a
discriminative answer head or a generative decoder, and the per-dialog turn
loop that threads the tracker state across turns.

Discriminative path: combine [CLS] + states + objects + question, run the
encoder stack, classify the final [CLS] row over the candidate answers.

Generative path: the encoder runs without [CLS]; a decoder with causal
self-attention over [question, answer] and cross-attention into the encoder
output predicts answer tokens left to right (teacher-forced during training,
greedy at inference, capped at ``max_gen_len`` tokens).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attention import (
    AttentionConfig,
    attention_to,
    causal_mask,
    cross_layer,
    init_attention,
    init_cross_layer,
    init_layer_norm,
    init_linear,
    init_transformer_layer,
    transformer_layer,
    uniform_init,
)
from .combiner import combine_a, combine_b, combine_c, sequence_layout
from .data import EOS_ID, VOCAB, DialogEpisode, derive_seed, encode_tokens
from .encoders import D_OBJ, FixtureEmbedder, encode_objects, encode_text, scene_latents
from .tensor import (
    Tensor,
    add,
    cross_entropy,
    detach,
    dropout,
    matmul,
    scale,
    select_row,
    slice_rows,
    vecmat,
)
from .trackers import (
    DialogState,
    TrackerConfig,
    TurnRecord,
    advance_state,
    select_top_k_discriminative,
    select_top_k_generative,
)

MODES = ("discriminative", "generative")


@dataclass(frozen=True)
class ModelConfig:
    """Every architecture hyperparameter. Defaults reproduce the reference
    optimum: 4 encoder layers with 6 heads at width 216, 2-layer trackers
    carrying k=2 objects over a 7-turn history, 40 candidate answers, 20
    sampled frames with 12 object slots, 768-dim frozen word embeddings."""

    l: int = 4
    heads: int = 6
    d: int = 216
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    combiner: str = "A"
    combiner_layers: int = 1
    mode: str = "discriminative"
    n_candidates: int = 40
    vocab_size: int = len(VOCAB)
    max_gen_len: int = 40
    t: int = 20
    n_o: int = 12
    d_w: int = 768
    d_obj: int = D_OBJ
    max_text_len: int = 24
    ffn: bool = False
    dropout: float = 0.0
    dtype: str = "f32"
    use_ost: bool = True
    use_lst: bool = True
    full_bptt: bool = False
    lst_recency: bool = False
    noise_sigma: float = 0.01
    noise_seed: int = 0
    embed_seed: int = 0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.combiner not in ("A", "B", "C"):
            raise ValueError(f"unknown combiner variant {self.combiner!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(d=self.d, heads=self.heads)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tracker"] = asdict(self.tracker)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        tracker = d.pop("tracker", {})
        known = {f for f in cls.__dataclass_fields__ if f != "tracker"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        bad = set(tracker) - set(TrackerConfig.__dataclass_fields__)
        if bad:
            raise ValueError(f"unknown tracker config keys: {sorted(bad)}")
        return cls(tracker=TrackerConfig(**tracker), **d)


@dataclass
class ModelOutput:
    """Per-turn result: logits (answer space or per-position vocab space),
    the dialog state used for the turn, the final-layer attention, the object
    indices chosen for the next turn's tracker update and the turn record
    that feeds the next update."""

    logits: Tensor
    state: DialogState
    attention: np.ndarray
    selected: list
    record: TurnRecord


def build_embedder(cfg: ModelConfig) -> FixtureEmbedder:
    return FixtureEmbedder(cfg.embed_seed, cfg.vocab_size, cfg.d_w,
                           dtype=cfg.np_dtype)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Learnable parameters in a flat name -> Tensor registry. Frozen fixture
    tables are deliberately not part of it. Creation order is fixed, so the
    same seed always produces bit-identical parameters."""
    rng = np.random.default_rng(derive_seed(seed, "init"))
    dtype = cfg.np_dtype
    d = cfg.d
    params: dict[str, Tensor] = {}

    if cfg.mode == "discriminative":
        params["cls"] = uniform_init(rng, (d,), d, dtype)
    params["obj.w"] = uniform_init(rng, (cfg.d_obj, d), cfg.d_obj, dtype)
    params["obj.pos"] = uniform_init(rng, (cfg.t * cfg.n_o, d), d, dtype)
    params["txt.w"] = uniform_init(rng, (cfg.d_w, d), cfg.d_w, dtype)
    params["txt.pos"] = uniform_init(rng, (cfg.max_text_len, d), d, dtype)

    for layer in range(cfg.l):
        init_transformer_layer(params, f"enc.{layer}", rng, d, dtype, cfg.ffn)

    if cfg.use_ost:
        for layer in range(cfg.tracker.l_ost):
            init_transformer_layer(params, f"ost.{layer}", rng, d, dtype, cfg.ffn)
    if cfg.use_lst:
        params["lst.w"] = uniform_init(rng, (cfg.d_w, d), cfg.d_w, dtype)
        if cfg.lst_recency:
            params["lst.age"] = uniform_init(rng, (cfg.tracker.history, d), d, dtype)
        for layer in range(cfg.tracker.l_lst):
            init_transformer_layer(params, f"lst.{layer}", rng, d, dtype, cfg.ffn)

    if cfg.combiner == "B" and (cfg.use_ost or cfg.use_lst):
        params["comb.w"] = uniform_init(rng, (2 * d, d), 2 * d, dtype)
    elif cfg.combiner == "C":
        if cfg.use_ost:
            for layer in range(cfg.combiner_layers):
                init_transformer_layer(params, f"comb.obj.{layer}", rng, d, dtype, cfg.ffn)
        if cfg.use_lst:
            for layer in range(cfg.combiner_layers):
                init_transformer_layer(params, f"comb.txt.{layer}", rng, d, dtype, cfg.ffn)

    if cfg.mode == "discriminative":
        init_linear(params, "head", rng, d, cfg.n_candidates, dtype)
    else:
        params["dec.pos"] = uniform_init(
            rng, (cfg.max_text_len + cfg.max_gen_len, d), d, dtype
        )
        for layer in range(cfg.l):
            init_cross_layer(params, f"dec.{layer}", rng, d, dtype, cfg.ffn)
        init_linear(params, "vocab", rng, d, cfg.vocab_size, dtype)

    return params


def no_decay(name: str) -> bool:
    """Weight decay is skipped for layer-norm gains/biases and position
    embeddings."""
    return ".ln." in name or name.endswith(".pos") or name.endswith((".gamma", ".beta"))


def parameter_count(params: dict) -> int:
    return sum(p.data.size for p in params.values())


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _combine(params, cfg, cls, s_o, s_l, h_obj, h_w):
    if cfg.combiner == "A":
        return combine_a(cls, s_o, s_l, h_obj, h_w)
    if cfg.combiner == "B":
        w_b = params.get("comb.w")
        return combine_b(cls, s_o, s_l, h_obj, h_w, w_b)
    return combine_c(cls, s_o, s_l, h_obj, h_w, params, cfg.attention,
                     layers=cfg.combiner_layers, ffn=cfg.ffn)


def _state_rows(cfg, state: DialogState):
    s_o = state.s_o if cfg.use_ost else None
    s_l = state.s_l if cfg.use_lst else None
    return s_o, s_l


def _maybe_dropout(x, cfg, rng):
    if rng is not None and cfg.dropout > 0.0:
        return dropout(x, cfg.dropout, rng)
    return x


def _encoder_stack(params, cfg, seq, drop_rng=None):
    weights = None
    for layer in range(cfg.l):
        seq, weights = transformer_layer(params, f"enc.{layer}", seq,
                                         cfg.attention, ffn=cfg.ffn)
        seq = _maybe_dropout(seq, cfg, drop_rng)
    return seq, weights


def forward_discriminative(latents: np.ndarray, question_ids, state: DialogState,
                           params: dict, cfg: ModelConfig,
                           embedder: FixtureEmbedder,
                           record: TurnRecord | None = None,
                           drop_rng=None) -> ModelOutput:
    """One discriminative turn: advance the state, fuse inputs, encode, and
    score the candidate answers from the final [CLS] embedding."""
    if cfg.mode != "discriminative":
        raise ValueError("model is configured for generative mode")
    state = advance_state(state, record, params, cfg)
    h_obj = encode_objects(latents, params["obj.w"], params["obj.pos"])
    h_w = encode_text(question_ids, embedder, params["txt.w"], params["txt.pos"])
    s_o, s_l = _state_rows(cfg, state)
    seq = _combine(params, cfg, params["cls"], s_o, s_l, h_obj, h_w)
    seq = _maybe_dropout(seq, cfg, drop_rng)
    seq, weights = _encoder_stack(params, cfg, seq, drop_rng)

    m = cfg.t * cfg.n_o
    layout = sequence_layout(cfg.combiner, m, len(question_ids), with_cls=True,
                             use_ost=cfg.use_ost, use_lst=cfg.use_lst)
    logits = add(vecmat(select_row(seq, layout.cls_index), params["head.w"]),
                 params["head.b"])

    alpha = attention_to(layout.cls_index, weights,
                         range(layout.obj_start, layout.obj_stop))
    selected = (select_top_k_discriminative(alpha, cfg.tracker.k)
                if cfg.use_ost else [])
    obj_rows = slice_rows(seq, layout.obj_start, layout.obj_stop)
    if not cfg.full_bptt:
        obj_rows = detach(obj_rows)
    new_record = TurnRecord(obj_rows=obj_rows, alpha=alpha, selected=selected)
    return ModelOutput(logits=logits, state=state, attention=weights,
                       selected=selected, record=new_record)


def _decoder_stream(params, cfg, embedder, token_ids):
    table = embedder.embed(token_ids).astype(cfg.np_dtype)
    h = matmul(Tensor(table), params["txt.w"])
    return add(h, slice_rows(params["dec.pos"], 0, len(token_ids)))


def _generative_encode(latents, question_ids, state, params, cfg, embedder,
                       record, drop_rng=None):
    state = advance_state(state, record, params, cfg)
    h_obj = encode_objects(latents, params["obj.w"], params["obj.pos"])
    h_w = encode_text(question_ids, embedder, params["txt.w"], params["txt.pos"])
    s_o, s_l = _state_rows(cfg, state)
    seq = _combine(params, cfg, None, s_o, s_l, h_obj, h_w)
    seq = _maybe_dropout(seq, cfg, drop_rng)
    enc, _ = _encoder_stack(params, cfg, seq, drop_rng)
    return state, enc


def _decode(params, cfg, embedder, enc, question_ids, answer_ids, drop_rng=None):
    """Run the decoder over [question, answer] with causal visibility on the
    answer positions. Returns (stream, final cross-attention weights)."""
    ids = list(question_ids) + list(answer_ids)
    limit = cfg.max_text_len + cfg.max_gen_len
    if len(ids) > limit:
        raise ValueError(f"decoder stream of {len(ids)} exceeds limit {limit}")
    stream = _decoder_stream(params, cfg, embedder, ids)
    mask = causal_mask(len(question_ids), len(answer_ids))
    xweights = None
    for layer in range(cfg.l):
        stream, xweights = cross_layer(params, f"dec.{layer}", stream, enc,
                                       cfg.attention, mask=mask, ffn=cfg.ffn)
        stream = _maybe_dropout(stream, cfg, drop_rng)
    return stream, xweights


def _gen_record(cfg, enc, xweights, n_question):
    m = cfg.t * cfg.n_o
    layout = sequence_layout(cfg.combiner, m, n_question, with_cls=False,
                             use_ost=cfg.use_ost, use_lst=cfg.use_lst)
    token_attn = xweights.mean(axis=0)[:n_question, layout.obj_start:layout.obj_stop]
    alpha = token_attn.sum(axis=0)
    selected = (select_top_k_generative(token_attn, cfg.tracker.k)
                if cfg.use_ost else [])
    obj_rows = slice_rows(enc, layout.obj_start, layout.obj_stop)
    if not cfg.full_bptt:
        obj_rows = detach(obj_rows)
    return TurnRecord(obj_rows=obj_rows, alpha=alpha, selected=selected), selected


def forward_generative_teacher_forced(latents, question_ids, answer_ids,
                                      state: DialogState, params: dict,
                                      cfg: ModelConfig, embedder: FixtureEmbedder,
                                      record: TurnRecord | None = None,
                                      drop_rng=None) -> ModelOutput:
    """Teacher-forced generative turn: position t's logits predict answer
    token t+1; earlier positions never see later answer tokens."""
    if cfg.mode != "generative":
        raise ValueError("model is configured for discriminative mode")
    if len(answer_ids) == 0:
        raise ValueError("teacher forcing needs at least one answer token")
    state, enc = _generative_encode(latents, question_ids, state, params, cfg,
                                    embedder, record, drop_rng)
    stream, xweights = _decode(params, cfg, embedder, enc, question_ids,
                               answer_ids, drop_rng)
    n_q, n_a = len(question_ids), len(answer_ids)
    rows = slice_rows(stream, n_q - 1, n_q + n_a - 1)
    logits = add(matmul(rows, params["vocab.w"]), params["vocab.b"])
    new_record, selected = _gen_record(cfg, enc, xweights, n_q)
    return ModelOutput(logits=logits, state=state, attention=xweights,
                       selected=selected, record=new_record)


def teacher_forced_loss(output: ModelOutput, answer_ids) -> Tensor:
    """Mean cross-entropy over the answer positions."""
    total = None
    for j, target in enumerate(answer_ids):
        ce = cross_entropy(select_row(output.logits, j), int(target))
        total = ce if total is None else add(total, ce)
    return scale(total, 1.0 / len(answer_ids))


def generate(latents, question_ids, state: DialogState, params: dict,
             cfg: ModelConfig, embedder: FixtureEmbedder,
             record: TurnRecord | None = None,
             max_len: int | None = None):
    """Greedy decoding: emit the argmax token step by step until [EOS] or the
    length cap. Returns (token ids including any [EOS], ModelOutput whose
    logits are the last step's logits)."""
    if cfg.mode != "generative":
        raise ValueError("model is configured for discriminative mode")
    cap = cfg.max_gen_len if max_len is None else min(max_len, cfg.max_gen_len)
    state, enc = _generative_encode(latents, question_ids, state, params, cfg,
                                    embedder, record)
    generated: list[int] = []
    stream = xweights = None
    while len(generated) < cap:
        stream, xweights = _decode(params, cfg, embedder, enc, question_ids,
                                   generated)
        last = select_row(stream, stream.data.shape[0] - 1)
        step_logits = add(vecmat(last, params["vocab.w"]), params["vocab.b"])
        token = int(np.argmax(step_logits.data))
        generated.append(token)
        if token == EOS_ID:
            break
    new_record, selected = _gen_record(cfg, enc, xweights, len(question_ids))
    last_logits = add(matmul(slice_rows(stream, stream.data.shape[0] - 1,
                                        stream.data.shape[0]),
                             params["vocab.w"]), params["vocab.b"])
    return generated, ModelOutput(logits=last_logits, state=state,
                                  attention=xweights, selected=selected,
                                  record=new_record)


def predict_answer(logits) -> int:
    """Argmax with ties resolved toward the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.size == 0:
        raise ValueError("cannot predict from empty logits")
    return int(np.argmax(data))


# ---------------------------------------------------------------------------
# Dialog loop
# ---------------------------------------------------------------------------

def answer_word_ids(answer: str) -> list[int]:
    return encode_tokens(answer.split())


def answer_target_ids(answer: str) -> list[int]:
    """Generative target: the answer words followed by [EOS]."""
    return answer_word_ids(answer) + [EOS_ID]


def episode_latents(episode: DialogEpisode, cfg: ModelConfig) -> np.ndarray:
    return scene_latents(episode.scene, cfg.t, cfg.n_o, cfg.noise_sigma,
                         cfg.noise_seed, dtype=cfg.np_dtype)


def run_dialog(episode: DialogEpisode, params: dict, cfg: ModelConfig,
               embedder: FixtureEmbedder, compute_loss: bool = False,
               drop_rng=None):
    """Run every turn of an episode in order, threading the dialog state.

    History fed to the language tracker uses the ground-truth answers (the
    evaluation default for the discriminative task). Returns (outputs, loss)
    where loss is the mean over turns (None unless compute_loss).
    """
    if not episode.turns:
        raise ValueError("episode has no turns")
    latents = episode_latents(episode, cfg)
    state = DialogState.initial(cfg.d, cfg.np_dtype)
    record = None
    outputs = []
    loss_sum = None
    for turn in episode.turns:
        q_ids = encode_tokens(turn.question)
        if cfg.mode == "discriminative":
            out = forward_discriminative(latents, q_ids, state, params, cfg,
                                         embedder, record, drop_rng)
            if compute_loss:
                ce = cross_entropy(out.logits, turn.answer_index)
                loss_sum = ce if loss_sum is None else add(loss_sum, ce)
            history_answer = answer_word_ids(turn.answer)
        else:
            target = answer_target_ids(turn.answer)
            out = forward_generative_teacher_forced(
                latents, q_ids, target, state, params, cfg, embedder, record,
                drop_rng)
            if compute_loss:
                ce = teacher_forced_loss(out, target)
                loss_sum = ce if loss_sum is None else add(loss_sum, ce)
            history_answer = answer_word_ids(turn.answer)
        record = out.record
        record.qa_tokens = embedder.embed(q_ids + history_answer)
        state = out.state
        outputs.append(out)
    loss = scale(loss_sum, 1.0 / len(episode.turns)) if loss_sum is not None else None
    return outputs, loss


def run_dialog_generate(episode: DialogEpisode, params: dict, cfg: ModelConfig,
                        embedder: FixtureEmbedder):
    """Generative evaluation loop: answers are generated greedily and the
    model's own answers populate the history."""
    if not episode.turns:
        raise ValueError("episode has no turns")
    latents = episode_latents(episode, cfg)
    state = DialogState.initial(cfg.d, cfg.np_dtype)
    record = None
    decoded = []
    for turn in episode.turns:
        q_ids = encode_tokens(turn.question)
        tokens, out = generate(latents, q_ids, state, params, cfg, embedder,
                               record)
        record = out.record
        history_answer = [t for t in tokens if t != EOS_ID]
        record.qa_tokens = embedder.embed(q_ids + history_answer)
        state = out.state
        decoded.append(tokens)
    return decoded


def ablated(cfg: ModelConfig, use_ost: bool | None = None,
            use_lst: bool | None = None) -> ModelConfig:
    """Convenience for the tracker on/off study grid."""
    changes = {}
    if use_ost is not None:
        changes["use_ost"] = use_ost
    if use_lst is not None:
        changes["use_lst"] = use_lst
    return replace(cfg, **changes)
