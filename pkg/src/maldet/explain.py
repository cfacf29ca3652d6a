"""Perturbation-based local explanations of single predictions.

Masks random subsets of a sequence's active positions (disabled calls are
replaced by the PAD id, so positions stay aligned), queries the model on
every variant, and fits a proximity-weighted ridge surrogate whose
coefficients are reported as per-call contributions toward the predicted
class. Positive weight always means "supports the prediction".
"""

from __future__ import annotations

import html
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import EmptySequence, SingularSystem
from .network import ModelBundle, predict_proba
from .tensor import Rng
from .textprep import PAD_ID, encode

DEFAULT_NUM_SAMPLES = 1000
DEFAULT_TOP_K = 10
RIDGE_LAMBDA = 0.01
KERNEL_SIGMA_SCALE = 0.75


def perturb(ids, num_samples: int, rng: Rng) -> np.ndarray:
    """Binary mask matrix over the active (non-PAD) positions.

    Row 0 is all ones (the original sequence). Every other row disables
    k ~ uniform{1 .. L_active - 1} distinct positions, so the fully
    disabled mask never appears when at least two calls are active;
    a sole-token sequence only has its single-disabled complement.
    """
    ids = np.asarray(ids)
    active = int((ids != PAD_ID).sum())
    if active == 0:
        raise EmptySequence("sequence has no active tokens to perturb")
    if num_samples < 2:
        raise ValueError("num_samples must be at least 2")
    masks = np.ones((num_samples, active))
    for row in range(1, num_samples):
        if active >= 2:
            k = 1 + rng.randbelow(active - 1)
            masks[row, rng.choose(active, k)] = 0.0
        else:
            masks[row, 0] = 0.0
    return masks


def proximity(mask) -> float:
    """exp(-d^2 / sigma^2) with d the cosine distance from the all-ones mask
    and sigma = 0.75 * sqrt(L_active).

    The all-zero mask (reachable only for sole-token sequences) is assigned
    the maximum distance 1.
    """
    mask = np.asarray(mask, dtype=np.float64)
    enabled = float(mask.sum())
    size = mask.shape[0]
    distance = 1.0 if enabled == 0.0 else 1.0 - math.sqrt(enabled / size)
    sigma = KERNEL_SIGMA_SCALE * math.sqrt(size)
    return math.exp(-(distance * distance) / (sigma * sigma))


@dataclass
class PerturbationSet:
    """Masks with the model's predictions and proximity weights per row."""

    masks: np.ndarray
    predictions: np.ndarray
    proximities: np.ndarray


def fit_surrogate(pset: PerturbationSet, ridge_lambda: float = RIDGE_LAMBDA
                  ) -> tuple[np.ndarray, float]:
    """Proximity-weighted ridge regression of predictions on masks.

    Closed-form normal equations; the intercept column is not penalized.
    """
    masks = np.asarray(pset.masks, dtype=np.float64)
    preds = np.asarray(pset.predictions, dtype=np.float64)
    prox = np.asarray(pset.proximities, dtype=np.float64)
    samples, active = masks.shape
    design = np.hstack([masks, np.ones((samples, 1))])
    weighted = design * prox[:, None]
    normal = design.T @ weighted
    normal[np.arange(active), np.arange(active)] += ridge_lambda
    rhs = weighted.T @ preds
    try:
        solution = np.linalg.solve(normal, rhs)
    except np.linalg.LinAlgError:
        raise SingularSystem(
            "surrogate normal equations are singular (ridge_lambda = 0?)") from None
    return solution[:active], float(solution[active])


@dataclass
class Explanation:
    """Per-call surrogate weights for one prediction.

    Weights are oriented toward the predicted class, i.e. positive always
    supports it; ``local_prediction`` is the model's probability for that
    class on the unmasked sequence.
    """

    tokens: list[tuple[int, str]]
    weights: np.ndarray
    intercept: float
    local_prediction: float
    class_label: str
    sha256: str = ""
    top_k: int = DEFAULT_TOP_K

    @property
    def surrogate_residual(self) -> float:
        return self.local_prediction - (self.intercept + float(np.sum(self.weights)))

    def ranked(self) -> list[tuple[int, str, float]]:
        order = np.argsort(-self.weights, kind="stable")
        return [(self.tokens[i][0], self.tokens[i][1], float(self.weights[i]))
                for i in order]

    def supporting(self) -> list[tuple[int, str, float]]:
        return [t for t in self.ranked() if t[2] > 0][: self.top_k]

    def opposing(self) -> list[tuple[int, str, float]]:
        return [t for t in self.ranked()[::-1] if t[2] < 0][: self.top_k]

    def to_dict(self) -> dict:
        return {
            "sha256": self.sha256,
            "predicted_class": self.class_label,
            "probability": self.local_prediction,
            "intercept": self.intercept,
            "tokens": [
                {"index": idx, "api": name, "weight": float(w)}
                for (idx, name), w in zip(self.tokens, self.weights)
            ],
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n",
            encoding="utf-8")


def explain_with_predictor(predict_fn: Callable[[np.ndarray], np.ndarray], ids,
                           display_tokens: list[str],
                           num_samples: int = DEFAULT_NUM_SAMPLES,
                           top_k: int = DEFAULT_TOP_K, seed: int = 0,
                           sha256: str = "",
                           ridge_lambda: float = RIDGE_LAMBDA) -> Explanation:
    """Explainer core against any black-box batch predictor of P(malware)."""
    ids = np.asarray(ids)
    rng = Rng(seed)
    masks = perturb(ids, num_samples, rng)
    active = masks.shape[1]
    variants = np.repeat(ids[None, :], num_samples, axis=0)
    variants[:, :active] = variants[:, :active] * masks.astype(np.int64)
    probs_malware = np.asarray(predict_fn(variants), dtype=np.float64)
    predicted_malware = probs_malware[0] >= 0.5
    predictions = probs_malware if predicted_malware else 1.0 - probs_malware
    proximities = np.array([proximity(m) for m in masks])
    weights, intercept = fit_surrogate(
        PerturbationSet(masks, predictions, proximities), ridge_lambda)
    return Explanation(
        tokens=[(i, display_tokens[i]) for i in range(active)],
        weights=weights,
        intercept=intercept,
        local_prediction=float(predictions[0]),
        class_label="malware" if predicted_malware else "benign",
        sha256=sha256,
        top_k=top_k,
    )


def explain(bundle: ModelBundle, tokens: list[str],
            num_samples: int = DEFAULT_NUM_SAMPLES, top_k: int = DEFAULT_TOP_K,
            seed: int = 0, sha256: str = "") -> Explanation:
    """Encode, perturb, batch-predict, and fit the surrogate for one sample."""
    ids = encode(tokens, bundle.vocabulary, bundle.config.n)
    return explain_with_predictor(
        lambda variants: predict_proba(bundle, variants),
        ids, tokens, num_samples=num_samples, top_k=top_k, seed=seed, sha256=sha256)


# ---------------------------------------------------------------------------
# HTML rendering
# ---------------------------------------------------------------------------

_PAGE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>Prediction explanation {sha}</title>
<style>
body {{ font-family: sans-serif; margin: 2em; max-width: 60em; }}
.bar {{ background: #eee; width: 24em; height: 1.2em; border: 1px solid #999; }}
.bar div {{ background: {bar_color}; height: 100%; width: {prob_pct:.1f}%; }}
table {{ border-collapse: collapse; margin: 0.6em 0; }}
td, th {{ border: 1px solid #ccc; padding: 0.2em 0.7em; text-align: left; }}
.seq span {{ padding: 0.1em 0.25em; margin: 0.1em; display: inline-block;
             border-radius: 3px; }}
</style>
</head>
<body>
<h1>Predicted class: {cls}</h1>
<p>Probability of the predicted class: <strong>{prob:.4f}</strong></p>
<div class="bar"><div></div></div>
<h2>Calls supporting the prediction</h2>
{support_table}
<h2>Calls opposing the prediction</h2>
{oppose_table}
<h2>Sequence with highlighted calls</h2>
<p class="seq">{sequence}</p>
<p><small>Intercept {intercept:.4f}; weights are local surrogate
coefficients toward the predicted class.</small></p>
</body>
</html>
"""


def _weight_table(rows: list[tuple[int, str, float]]) -> str:
    if not rows:
        return "<p>none</p>"
    body = "\n".join(
        f"<tr><td>{idx}</td><td>{html.escape(name)}</td><td>{weight:+.4f}</td></tr>"
        for idx, name, weight in rows)
    return ("<table><tr><th>index</th><th>api</th><th>weight</th></tr>\n"
            + body + "\n</table>")


def render_html(expl: Explanation, path: str | Path) -> None:
    """Self-contained HTML report: probability bar, signed weight lists, and
    the index-prefixed sequence with calls shaded by |weight| (green supports
    the predicted class, red opposes)."""
    max_abs = float(np.max(np.abs(expl.weights))) if len(expl.weights) else 0.0
    spans = []
    for (idx, name), weight in zip(expl.tokens, expl.weights):
        alpha = 0.0 if max_abs == 0.0 else 0.85 * abs(float(weight)) / max_abs
        color = "0,160,0" if weight > 0 else "200,0,0"
        style = f"background: rgba({color},{alpha:.3f});" if alpha > 0.005 else ""
        spans.append(f'<span style="{style}">{idx} {html.escape(name)}</span>')
    page = _PAGE.format(
        sha=html.escape(expl.sha256),
        cls=html.escape(expl.class_label),
        prob=expl.local_prediction,
        prob_pct=100.0 * expl.local_prediction,
        bar_color="#c00" if expl.class_label == "malware" else "#2a2",
        support_table=_weight_table(expl.supporting()),
        oppose_table=_weight_table(expl.opposing()),
        sequence=" ".join(spans),
        intercept=expl.intercept,
    )
    Path(path).write_text(page, encoding="utf-8")
