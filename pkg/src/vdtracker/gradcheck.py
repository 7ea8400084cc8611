"""Finite-difference verification of analytic gradients.

The scalar loss is re-evaluated with each parameter element nudged by ±h
(central differences) and compared against the gradient produced by the
reverse sweep. Run in f64: with h = 1e-5 the truncation error sits far below
the 1e-4 relative tolerance used throughout the test suite.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |a|, |n|), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(f: Callable[[], float], t: Tensor, h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` w.r.t. every element
    of ``t`` (mutates ``t.data`` in place, restoring it afterwards)."""
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_gradients(
    f: Callable[[], Tensor], params: Mapping[str, Tensor]
) -> dict[str, np.ndarray]:
    """Run one taped forward/backward and return grads keyed like ``params``."""
    for p in params.values():
        p.zero_grad()
    with Tape():
        loss = f()
        backward(loss)
    out = {}
    for name, p in params.items():
        out[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    return out


def check_gradients(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
) -> dict[str, float]:
    """Compare analytic vs central-difference gradients for every parameter.

    ``f`` rebuilds the forward pass from the current parameter values on each
    call. Returns {name: max relative error}; a result is passing when every
    entry is <= tol.
    """
    analytic = analytic_gradients(f, params)

    def loss_value() -> float:
        return float(f().data)

    report = {}
    for name, p in params.items():
        numeric = numeric_gradient(loss_value, p, h=h)
        report[name] = relative_error(analytic[name], numeric)
    return report


def all_within(report: Mapping[str, float], tol: float = DEFAULT_TOL) -> bool:
    return all(err <= tol for err in report.values())


# ---------------------------------------------------------------------------
# End-to-end model harness
# ---------------------------------------------------------------------------

def tiny_config(mode: str = "discriminative"):
    """The gradient-check model: every stack one layer, width 12, two heads,
    2x2 object grid, four candidate answers, f64, full backpropagation
    through turns (finite differences cannot see detachment boundaries, so
    the check runs the variant whose graph spans the whole dialog)."""
    from .model import ModelConfig
    from .trackers import TrackerConfig

    return ModelConfig(
        l=1, heads=2, d=12,
        tracker=TrackerConfig(l_ost=1, l_lst=1, k=2, history=7),
        mode=mode, n_candidates=4, t=2, n_o=2, d_w=16,
        max_text_len=8, max_gen_len=6, dtype="f64",
        full_bptt=True, noise_sigma=0.0,
    )


def _tiny_episode(seed: int = 7):
    """Two handcrafted turns (3-token questions, answer indices < 4) over a
    generated 2-object scene: enough to light up both trackers."""
    from .data import DialogEpisode, Turn, generate_scene

    scene = generate_scene(seed, n_objects=2, num_frames=4)
    turns = [
        Turn(question=["what", "color", "?"], category="attribute_query",
             coref=False, answer_index=1, answer="red"),
        Turn(question=["what", "size", "?"], category="attribute_query",
             coref=True, answer_index=3, answer="small"),
    ]
    return DialogEpisode(episode_id=seed, scene=scene, turns=turns)


def model_gradient_check(mode: str = "discriminative", seed: int = 0,
                         h: float = DEFAULT_H) -> dict[str, float]:
    """Finite-difference check of every model parameter against the full
    two-turn dialog loss. Returns {parameter name: max relative error}."""
    from .model import build_embedder, init_params, run_dialog

    cfg = tiny_config(mode)
    params = init_params(cfg, seed)
    embedder = build_embedder(cfg)
    episode = _tiny_episode()

    def loss_fn():
        _, loss = run_dialog(episode, params, cfg, embedder, compute_loss=True)
        return loss

    return check_gradients(loss_fn, params, h=h)
