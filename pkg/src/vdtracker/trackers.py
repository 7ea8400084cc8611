"""Recurrent dialog-state trackers.

Two small transformer stacks maintain the dialog state across turns:

* the object tracker updates its state vector from the previous state plus
  the k object embeddings that received the most attention in the previous
  turn's forward pass;
* the language tracker recomputes its state vector from the token embeddings
  of the most recent H question-answer turns.

The object state is genuinely recurrent (previous vector feeds the update).
The language state is re-executed from a zero seed over the windowed history
every turn, which makes it bit-exactly invariant to anything older than the
H-turn window; a recurrent carry would leak older turns through the state
vector and break that guarantee.

Between turns both state vectors and the carried object embeddings are
detached by default, so each turn's loss trains that turn's update only.
``full_bptt`` keeps everything on one tape for whole-dialog gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, transformer_layer
from .tensor import (
    Tensor,
    add,
    concat,
    detach,
    matmul,
    select_row,
    stack_rows,
)


@dataclass(frozen=True)
class TrackerConfig:
    """Layer counts and capacity of the two trackers (defaults are the
    best-performing configuration)."""

    l_ost: int = 2
    l_lst: int = 2
    k: int = 2
    history: int = 7


@dataclass
class DialogState:
    """State carried turn to turn. At turn_index 0 both vectors are exact
    zeros; carried_objects holds at most k rows and history_tokens at most
    the H most recent turns."""

    s_o: Tensor | None
    s_l: Tensor | None
    turn_index: int
    carried_objects: list = field(default_factory=list)
    history_tokens: list = field(default_factory=list)  # per-turn (n, d_w) arrays

    @classmethod
    def initial(cls, d: int, dtype=np.float32) -> "DialogState":
        return cls(
            s_o=Tensor(np.zeros(d, dtype=dtype)),
            s_l=Tensor(np.zeros(d, dtype=dtype)),
            turn_index=0,
        )


@dataclass
class TurnRecord:
    """What one completed turn leaves behind for the next turn's update:
    the final-layer object embeddings, the selection attention over them,
    the selected indices, and (once known) the turn's QA token embeddings."""

    obj_rows: Tensor            # (m, d) final-layer object block
    alpha: np.ndarray | None    # (m,) selection attention
    selected: list              # <= k indices into the object block
    qa_tokens: np.ndarray | None = None  # (n, d_w) frozen embeddings of Q + A


# ---------------------------------------------------------------------------
# Top-k selection
# ---------------------------------------------------------------------------

def select_top_k_discriminative(alpha: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest attention values, ties broken toward the
    lowest index, returned in ascending order. k beyond len(alpha) returns
    every index."""
    a = np.asarray(alpha)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("selection needs a nonempty 1-D attention vector")
    if k < 1:
        raise ValueError("k must be >= 1")
    order = np.argsort(-a, kind="stable")
    return sorted(int(i) for i in order[:k])


def select_top_k_generative(token_attentions: np.ndarray, k: int) -> list[int]:
    """Same rule applied to attention summed over all question tokens."""
    m = np.asarray(token_attentions)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ValueError("selection needs a nonempty (tokens x objects) matrix")
    return select_top_k_discriminative(m.sum(axis=0), k)


# ---------------------------------------------------------------------------
# Tracker updates
# ---------------------------------------------------------------------------

def ost_update(params: dict, s_o_prev: Tensor, carried_objects,
               acfg: AttentionConfig, layers: int, ffn: bool = False) -> Tensor:
    """Object-state update: run [s_o_prev, obj_1..obj_k] through the tracker
    layers and return row 0."""
    if not carried_objects:
        raise ValueError("ost_update needs at least one carried object")
    seq = stack_rows([s_o_prev] + list(carried_objects))
    for layer in range(layers):
        seq, _ = transformer_layer(params, f"ost.{layer}", seq, acfg, ffn=ffn)
    return select_row(seq, 0)


def lst_update(params: dict, s_l_prev: Tensor, history_tokens,
               acfg: AttentionConfig, layers: int, window: int,
               dtype=np.float32, ffn: bool = False,
               recency: bool = False) -> Tensor:
    """Language-state update over the last ``window`` turns.

    Input row 0 is ``s_l_prev``; the remaining rows are the projected token
    embeddings of the windowed turns in chronological order. Turns older than
    the window never enter the computation. With ``recency`` a learnable
    turn-age embedding is added to each turn's tokens (off by default: the
    plain concatenation keeps the literal formulation).
    """
    recent = list(history_tokens)[-window:]
    w = params["lst.w"]
    blocks = []
    for pos, turn_tokens in enumerate(recent):
        if len(turn_tokens) == 0:
            continue
        projected = matmul(Tensor(np.asarray(turn_tokens, dtype=dtype)), w)
        if recency:
            age = len(recent) - 1 - pos  # 0 = most recent turn
            projected = add(projected, select_row(params["lst.age"], age))
        blocks.append(projected)
    seq = concat([stack_rows([s_l_prev])] + blocks, axis=0)
    for layer in range(layers):
        seq, _ = transformer_layer(params, f"lst.{layer}", seq, acfg, ffn=ffn)
    return select_row(seq, 0)


def advance_state(prev: DialogState, record: TurnRecord | None, params: dict,
                  cfg) -> DialogState:
    """Produce the state entering the next turn.

    For the first turn (no completed turn yet) both vectors stay exact zeros.
    Afterwards the object state is updated from the previous turn's selected
    object rows and the language state from the windowed QA history. ``cfg``
    supplies d / tracker sizes / attention geometry / tracker toggles.
    """
    d = cfg.d
    dtype = np.float32 if cfg.dtype == "f32" else np.float64
    if record is None:
        if prev.turn_index != 0:
            raise ValueError("missing turn record after a completed turn")
        return DialogState(
            s_o=Tensor(np.zeros(d, dtype=dtype)),
            s_l=Tensor(np.zeros(d, dtype=dtype)),
            turn_index=1,
            carried_objects=[],
            history_tokens=list(prev.history_tokens),
        )
    if record.alpha is None:
        raise ValueError("turn record is missing selection attention")
    if record.qa_tokens is None:
        raise ValueError("turn record is missing the QA token embeddings")

    acfg = AttentionConfig(d=d, heads=cfg.heads)
    tracker = cfg.tracker
    history = (list(prev.history_tokens) + [record.qa_tokens])[-tracker.history:]

    carried = [select_row(record.obj_rows, i) for i in record.selected]

    if cfg.use_ost and carried:
        s_o_in = prev.s_o if cfg.full_bptt else detach(prev.s_o)
        s_o = ost_update(params, s_o_in, carried, acfg, tracker.l_ost, ffn=cfg.ffn)
    else:
        s_o = Tensor(np.zeros(d, dtype=dtype))

    if cfg.use_lst:
        seed = Tensor(np.zeros(d, dtype=dtype))
        s_l = lst_update(params, seed, history, acfg, tracker.l_lst,
                         tracker.history, dtype=dtype, ffn=cfg.ffn,
                         recency=getattr(cfg, "lst_recency", False))
    else:
        s_l = Tensor(np.zeros(d, dtype=dtype))

    if not cfg.full_bptt:
        carried = [detach(c) for c in carried]

    return DialogState(
        s_o=s_o,
        s_l=s_l,
        turn_index=prev.turn_index + 1,
        carried_objects=carried,
        history_tokens=history,
    )
