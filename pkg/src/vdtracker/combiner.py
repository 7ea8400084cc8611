"""Fusion of [CLS], state vectors, object embeddings and text embeddings.

Three selectable variants build the encoder input sequence:

* A concatenates everything as separate rows (the default and the strongest
  configuration);
* B conditions every object row on the object state and every text row on the
  language state through a d x 2d projection, then concatenates;
* C first runs a small transformer over [state, block] on each side and emits
  the transformer's updated row 0 as the standalone state row.

When a tracker is disabled its state row (and, for B/C, its conditioning) is
dropped entirely, which also removes the associated parameters from the
registry.
"""

from __future__ import annotations

from dataclasses import dataclass

from .attention import AttentionConfig, transformer_layer
from .tensor import ShapeError, Tensor, concat, matmul, select_row, slice_rows, stack_rows

VARIANTS = ("A", "B", "C")


@dataclass(frozen=True)
class SequenceLayout:
    """Row offsets of the combined sequence, used for answer readout and
    object selection."""

    rows: int
    cls_index: int | None
    obj_start: int
    obj_stop: int
    txt_start: int
    txt_stop: int


def sequence_layout(variant: str, m: int, n: int, with_cls: bool,
                    use_ost: bool, use_lst: bool) -> SequenceLayout:
    if variant not in VARIANTS:
        raise ValueError(f"unknown combiner variant {variant!r}")
    state_rows = 0 if variant == "B" else int(use_ost) + int(use_lst)
    head = int(with_cls) + state_rows
    return SequenceLayout(
        rows=head + m + n,
        cls_index=0 if with_cls else None,
        obj_start=head,
        obj_stop=head + m,
        txt_start=head + m,
        txt_stop=head + m + n,
    )


def _check_width(name: str, t: Tensor, d: int):
    width = t.data.shape[-1]
    if width != d:
        raise ShapeError(f"{name} has width {width}, expected {d}")


def _head_rows(cls, s_o, s_l):
    return [v for v in (cls, s_o, s_l) if v is not None]


def combine_a(cls: Tensor | None, s_o: Tensor | None, s_l: Tensor | None,
              h_obj: Tensor, h_w: Tensor) -> Tensor:
    """Plain concatenation: [cls, s_o, s_l, object rows, text rows]."""
    d = h_obj.data.shape[1]
    _check_width("text embeddings", h_w, d)
    for name, v in (("cls", cls), ("s_o", s_o), ("s_l", s_l)):
        if v is not None:
            _check_width(name, v, d)
    head = _head_rows(cls, s_o, s_l)
    parts = ([stack_rows(head)] if head else []) + [h_obj, h_w]
    return concat(parts, axis=0)


def _tile_row(v: Tensor, count: int) -> Tensor:
    return stack_rows([v] * count)


def combine_b(cls: Tensor | None, s_o: Tensor | None, s_l: Tensor | None,
              h_obj: Tensor, h_w: Tensor, w_b: Tensor) -> Tensor:
    """State-conditioned projection: each object row becomes
    W_b [s_o ; row] and each text row W_b [s_l ; row]; no standalone state
    rows. Sides without a tracker pass through unprojected."""
    d = h_obj.data.shape[1]
    _check_width("text embeddings", h_w, d)
    if (s_o is not None or s_l is not None) and w_b.data.shape != (2 * d, d):
        raise ShapeError(
            f"state projection must map 2d -> d (stored ({2 * d}, {d})), "
            f"got {w_b.data.shape}"
        )
    if s_o is not None:
        obj = matmul(concat([_tile_row(s_o, h_obj.data.shape[0]), h_obj], axis=1), w_b)
    else:
        obj = h_obj
    if s_l is not None:
        txt = matmul(concat([_tile_row(s_l, h_w.data.shape[0]), h_w], axis=1), w_b)
    else:
        txt = h_w
    parts = ([stack_rows([cls])] if cls is not None else []) + [obj, txt]
    return concat(parts, axis=0)


def combine_c(cls: Tensor | None, s_o: Tensor | None, s_l: Tensor | None,
              h_obj: Tensor, h_w: Tensor, params: dict, acfg: AttentionConfig,
              layers: int = 1, ffn: bool = False) -> Tensor:
    """Small pre-transformers over [state, block] per modality; the updated
    row 0 of each small transformer is emitted as that side's state row."""
    d = h_obj.data.shape[1]
    _check_width("text embeddings", h_w, d)
    if s_o is not None:
        seq = concat([stack_rows([s_o]), h_obj], axis=0)
        for layer in range(layers):
            seq, _ = transformer_layer(params, f"comb.obj.{layer}", seq, acfg, ffn=ffn)
        s_o = select_row(seq, 0)
        h_obj = slice_rows(seq, 1, seq.data.shape[0])
    if s_l is not None:
        seq = concat([stack_rows([s_l]), h_w], axis=0)
        for layer in range(layers):
            seq, _ = transformer_layer(params, f"comb.txt.{layer}", seq, acfg, ffn=ffn)
        s_l = select_row(seq, 0)
        h_w = slice_rows(seq, 1, seq.data.shape[0])
    head = _head_rows(cls, s_o, s_l)
    parts = ([stack_rows(head)] if head else []) + [h_obj, h_w]
    return concat(parts, axis=0)
