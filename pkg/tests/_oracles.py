"""Independent numeric oracles shared across the test modules.

Everything here is deliberately written without the library's tape: finite
differences probe gradients, and the scalar GRU / confusion-matrix / forward
references recompute results with plain Python loops or raw numpy so that the
implementation under test is checked against a second, separately derived
route.
"""

from __future__ import annotations

import math

import numpy as np

from maldet import tensor as T

FD_STEP = 1e-5
FD_TOL = 1e-4


def fd_gradient(fn, arrays: dict[str, np.ndarray], name: str, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of scalar fn(arrays) w.r.t. arrays[name]."""
    base = {k: v.copy() for k, v in arrays.items()}
    grad = np.zeros_like(base[name])
    flat = grad.reshape(-1)
    target = base[name].reshape(-1)
    for i in range(target.size):
        orig = target[i]
        target[i] = orig + step
        up = fn(base)
        target[i] = orig - step
        down = fn(base)
        target[i] = orig
        flat[i] = (up - down) / (2.0 * step)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / max(1, |numeric|), elementwise."""
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_op_gradients(build, arrays: dict[str, np.ndarray], rng: T.Rng,
                       tol: float = FD_TOL) -> float:
    """Compare tape gradients of a random projection of `build` to central FD.

    `build` maps a dict of Tensors to an output Tensor; the projection
    sum(output * R) with fixed random R makes the check scalar-valued.
    """
    probe = build({k: T.Tensor(v) for k, v in arrays.items()})
    r = rng.uniform(probe.shape, -1.0, 1.0) if probe.shape else np.asarray(rng.uniform((), -1.0, 1.0))

    def scalar_from(values: dict[str, np.ndarray]) -> float:
        tensors = {k: T.Tensor(v) for k, v in values.items()}
        return float(T.sum(T.mul(build(tensors), T.Tensor(r))).data)

    params = {k: T.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    loss = T.sum(T.mul(build(params), T.Tensor(r)))
    grads = T.backward(loss, params)

    worst = 0.0
    for name in arrays:
        numeric = fd_gradient(lambda vals: scalar_from(vals), arrays, name)
        worst = max(worst, rel_err(grads[name], numeric))
    assert worst < tol, f"gradient check failed: rel err {worst:.3e} >= {tol}"
    return worst


def scalar_gru_step(x: list[float], h_prev: list[float], p: dict[str, np.ndarray]) -> list[float]:
    """One GRU step computed with plain Python floats and explicit loops.

    Gating convention: z and r are sigmoid gates, the candidate state uses
    r elementwise on the recurrent term, and the new state is
    (1 - z) * candidate + z * previous.
    """
    def sig(v: float) -> float:
        return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))

    hidden = len(h_prev)
    h_new = []
    for j in range(hidden):
        z_in = float(p["b_z"][j])
        r_in = float(p["b_r"][j])
        for i, xi in enumerate(x):
            z_in += xi * float(p["w_zx"][i][j])
            r_in += xi * float(p["w_rx"][i][j])
        for k, hk in enumerate(h_prev):
            z_in += hk * float(p["u_zh"][k][j])
            r_in += hk * float(p["u_rh"][k][j])
        z = sig(z_in)
        r = sig(r_in)
        cand_in = float(p["b_h"][j])
        for i, xi in enumerate(x):
            cand_in += xi * float(p["w_hx"][i][j])
        rec = 0.0
        for k, hk in enumerate(h_prev):
            rec += hk * float(p["u_hh"][k][j])
        cand = math.tanh(cand_in + r * rec)
        h_new.append((1.0 - z) * cand + z * float(h_prev[j]))
    return h_new


def ref_forward(config, params: dict[str, np.ndarray], ids: np.ndarray) -> np.ndarray:
    """Eval-mode forward pass recomputed sample by sample with plain loops.

    Composes the per-layer reference routes: direct row indexing for the
    embedding, position-by-position window sums for the convolutions,
    explicit window maxima for pooling, the scalar GRU step for both
    directions, and dot products for the dense stack.
    """
    def sig(v: float) -> float:
        return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))

    out = []
    for row in np.asarray(ids):
        x = params["embed"][row]                                   # (n, d)
        for bi, blk in enumerate(config.conv_blocks):
            w, b = params[f"conv{bi}_w"], params[f"conv{bi}_b"]
            filters, kernel, _ = w.shape
            conv = np.zeros((x.shape[0] - kernel + 1, filters))
            for pos in range(conv.shape[0]):
                window = x[pos:pos + kernel]
                for f in range(filters):
                    conv[pos, f] = max(0.0, float((w[f] * window).sum() + b[f]))
            pooled_len = (conv.shape[0] - blk.pool_window) // blk.pool_stride + 1
            pooled = np.zeros((pooled_len, filters))
            for pos in range(pooled_len):
                s = pos * blk.pool_stride
                pooled[pos] = conv[s:s + blk.pool_window].max(axis=0)
            x = pooled

        def run_direction(seq, direction):
            p = {g: params[f"gru_{direction}_{g}"] for g in
                 ("w_zx", "u_zh", "b_z", "w_rx", "u_rh", "b_r", "w_hx", "u_hh", "b_h")}
            h = [0.0] * config.gru_hidden
            states = []
            for x_t in seq:
                h = scalar_gru_step(x_t.tolist(), h, p)
                states.append(h)
            return states

        fwd = run_direction(x, "fwd")
        bwd = run_direction(x[::-1], "bwd")[::-1]
        seq_out = np.array([f + b for f, b in zip(fwd, bwd)])
        v = seq_out.reshape(-1)
        for di in range(len(config.dense_layers)):
            v = np.maximum(v @ params[f"dense{di}_w"] + params[f"dense{di}_b"], 0.0)
        logit = float(v @ params["out_w"][:, 0] + params["out_b"][0])
        out.append(sig(logit))
    return np.array(out)


def confusion_counts(predicted: np.ndarray, labels: np.ndarray) -> tuple[int, int, int, int]:
    """Brute-force confusion counts with malware (1) as the positive class."""
    tp = tn = fp = fn = 0
    for p, y in zip(predicted.tolist(), labels.tolist()):
        if y == 1 and p == 1:
            tp += 1
        elif y == 0 and p == 0:
            tn += 1
        elif y == 0 and p == 1:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn
