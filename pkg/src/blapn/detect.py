"""Type I / Type II nonlinearity detection from BLA estimates at several powers.

Type I: input-output nonlinearity (moves the BLA or its distortion variance
with the reference power).  Type II: interaction between the input and the
process noise (the noise variance of the BLA no longer scales as the inverse
of the reference power).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bla import BlaEstimate

Z95 = 1.959963984540054
# allowance for the first-order variance formulas when testing slope = -1
SLOPE_MODEL_TOL = 0.1
# relative level below which the noise variance counts as absent
NOISE_FLOOR = 1e-20


@dataclass
class ExperimentSet:
    """BLA estimates of one system, each at its own reference power ``sigma_r^2``."""

    estimates: list
    powers: list | None = None

    def __post_init__(self):
        if self.powers is None:
            self.powers = [e.meta.get("ref_power") for e in self.estimates]
        if any(p is None for p in self.powers):
            raise ValueError("every estimate needs a reference power (meta['ref_power'])")
        self.powers = [float(p) for p in self.powers]
        if len(self.estimates) < 2 or len(set(np.round(self.powers, 12))) < 2:
            raise ValueError("need >=2 powers: detection compares distinct reference powers")
        common = self.estimates[0].k
        for e in self.estimates[1:]:
            common = np.intersect1d(common, e.k)
        if common.size == 0:
            raise ValueError("estimates share no excited bins")
        self.bins = common
        self.estimates = [e.subset(common) for e in self.estimates]
        order = np.argsort(self.powers, kind="stable")
        self.estimates = [self.estimates[i] for i in order]
        self.powers = [self.powers[i] for i in order]


@dataclass
class DetectionReport:
    bins: np.ndarray
    bla_changed: dict
    var_nl_changed: dict
    var_noise_inverse_power: dict
    excess_variance: dict
    type_i: str
    type_ii: str
    linear_hypothesis: str
    thresholds: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(d):
            return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}
        return {
            "bins": self.bins.tolist(),
            "bla_changed": clean(self.bla_changed),
            "var_nl_changed": clean(self.var_nl_changed),
            "var_noise_inverse_power": clean(self.var_noise_inverse_power),
            "excess_variance": clean(self.excess_variance),
            "type_i": self.type_i,
            "type_ii": self.type_ii,
            "linear_hypothesis": self.linear_hypothesis,
            "thresholds": self.thresholds,
            "notes": self.notes,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def table(self) -> str:
        yn = lambda b: "yes" if b else "no"  # noqa: E731
        inv = self.var_noise_inverse_power
        rows = [
            ("BLA changes with power", yn(self.bla_changed["value"]),
             f"weight {self.bla_changed['score']:.3f}"),
            ("var_nl changes with power", yn(self.var_nl_changed["value"]),
             f"weight {self.var_nl_changed['score']:.3f}"),
            ("var_noise ~ 1/sigma_r^2",
             "n/a" if inv["value"] is None else yn(inv["value"]),
             "" if inv["slope"] is None else f"slope {inv['slope']:.3f} +- {inv['band']:.3f}"),
            ("var_total > var_noise", yn(self.excess_variance["value"]),
             f"weight {self.excess_variance['score']:.3f}"),
        ]
        w = max(len(r[0]) for r in rows)
        lines = [f"{'test':<{w}}  verdict  score", "-" * (w + 30)]
        lines += [f"{a:<{w}}  {b:<7}  {c}" for a, b, c in rows]
        lines += ["-" * (w + 30), f"Type I:  {self.type_i}", f"Type II: {self.type_ii}",
                  f"linear hypothesis: {self.linear_hypothesis}"]
        return "\n".join(lines)


def _weighted_vote(flags, weights):
    """Fraction of the total |g| weight carried by the flagged bins."""
    w = np.asarray(weights, dtype=float)
    return float(np.sum(w * flags) / np.sum(w)) if np.sum(w) > 0 else 0.0


def _var_se(est: BlaEstimate):
    """Approximate standard errors of var_total, var_noise and var_nl per bin."""
    M = int(est.meta.get("M", 2))
    P = int(est.meta.get("P", 2))
    # complex samples behind each variance estimate
    if est.method == "fast_lpm":
        n_t = n_n = M * float(np.min(est.dof_bins))
    elif est.method == "fast":
        n_t, n_n = 4 * M, M * (P - 1)
    else:
        n_t, n_n = M - 1, M * (P - 1)
    n_t, n_n = max(n_t, 1), max(n_n, 1)
    se_t = est.var_total / math.sqrt(n_t)
    se_n = est.var_noise / math.sqrt(n_n)
    return se_t, se_n, np.sqrt(se_t**2 + se_n**2), n_n


def bla_change_scores(a: BlaEstimate, b: BlaEstimate):
    """Per-bin ``|g_a - g_b| / sqrt(var_total_a + var_total_b)``."""
    den = np.sqrt(a.var_total + b.var_total)
    diff = np.abs(a.g_bla - b.g_bla)
    return np.where(den > 0, diff / np.where(den > 0, den, 1), np.where(diff > 0, np.inf, 0.0))


def classify_nonlinearity(xs: ExperimentSet, z_threshold=3.0, majority=0.5) -> DetectionReport:
    """Apply the Type I / Type II decision rules to an experiment set.

    A test counts as positive when the bins exceeding ``z_threshold`` carry
    more than ``majority`` of the total |g| weight.
    """
    ests, powers = xs.estimates, np.asarray(xs.powers)
    weight = np.mean([np.abs(e.g_bla) for e in ests], axis=0)
    notes = []

    # (i) BLA change: any pair of powers
    z_bla = np.max([bla_change_scores(a, b) for i, a in enumerate(ests) for b in ests[i + 1:]],
                   axis=0)
    bla_frac = _weighted_vote(z_bla > z_threshold, weight)
    bla_changed = {"value": bla_frac > majority, "score": bla_frac, "z": z_bla}

    # (ii) var_nl change
    zs = []
    for i, a in enumerate(ests):
        for b in ests[i + 1:]:
            sa, sb = _var_se(a)[2], _var_se(b)[2]
            den = np.sqrt(sa**2 + sb**2)
            d = np.abs(a.var_nl - b.var_nl)
            zs.append(np.where(den > 0, d / np.where(den > 0, den, 1), 0.0))
    z_nl = np.max(zs, axis=0)
    nl_frac = _weighted_vote(z_nl > z_threshold, weight)
    nl_changed = {"value": nl_frac > majority, "score": nl_frac, "z": z_nl}

    # (iii) log-log slope of var_noise against sigma_r^2
    vn = np.array([e.var_noise for e in ests])
    scale = np.array([np.abs(e.g_bla) ** 2 + NOISE_FLOOR for e in ests])
    if np.all(vn <= NOISE_FLOOR * scale):
        inv = {"value": None, "slope": None, "band": None,
               "reason": "no measurable noise variance"}
        notes.append("noise variance vanishes at every power: no process noise to interact with")
        type_ii = "no"
    else:
        x = np.log(powers)
        lv = np.log(np.maximum(vn, NOISE_FLOOR * scale))
        xc = x - x.mean()
        slopes = (xc @ (lv - lv.mean(axis=0))) / (xc @ xc)
        # log of a variance estimate with n dof has sd ~ 1/sqrt(n)
        n_n = np.array([_var_se(e)[3] for e in ests])
        se_bin = np.sqrt(np.sum((xc[:, None] / (xc @ xc)) ** 2 / n_n[:, None], axis=0))
        w = weight / weight.sum()
        slope = float(np.sum(w * slopes))
        se = float(math.sqrt(np.sum(w**2 * se_bin**2)))
        band = Z95 * se + SLOPE_MODEL_TOL
        is_inv = abs(slope + 1.0) <= band
        inv = {"value": bool(is_inv), "slope": slope, "band": band, "slopes": slopes}
        type_ii = "no" if is_inv else "yes"

    # Type I from the BLA and distortion-variance tests
    if bla_changed["value"] or nl_changed["value"]:
        type_i = "yes"
    elif type_ii == "yes":
        # process noise present and interacting: an input-output nonlinearity
        # whose contribution hides below the process noise cannot be excluded
        type_i = "undecided"
        notes.append("BLA and var_nl unchanged while process noise interacts with the input")
    else:
        type_i = "no"

    # linear hypothesis: total variance significantly above the noise variance
    ex = []
    for e in ests:
        _, _, se, _ = _var_se(e)
        ex.append(np.where(se > 0, (e.var_total - e.var_noise) / np.where(se > 0, se, 1), 0.0))
    z_ex = np.max(ex, axis=0)
    ex_frac = _weighted_vote(z_ex > z_threshold, weight)
    excess = {"value": ex_frac > majority, "score": ex_frac, "z": z_ex}
    rejected = excess["value"] or type_i == "yes" or type_ii == "yes"

    return DetectionReport(
        xs.bins, bla_changed, nl_changed, inv, excess, type_i, type_ii,
        "rejected" if rejected else "consistent",
        {"z_threshold": z_threshold, "majority": majority, "slope_band_z": Z95,
         "slope_model_tol": SLOPE_MODEL_TOL,
         "noise_variance": "evaluated on the FRF noise variance var_noise"},
        notes)


def process_noise_bla_shift(low: BlaEstimate, high: BlaEstimate, z_threshold=3.0, majority=None,
                           min_bins=3):
    """Type II check from two process-noise levels at a fixed reference.

    Returns ``(verdict, z)``: ``verdict`` is ``"yes"`` when the BLA moves by
    more than ``z_threshold`` combined standard deviations at ``min_bins`` or
    more bins (a local resonance shift touches few bins), or over a |g|-weighted
    share ``majority`` of the bins when that is given.
    """
    ks = np.intersect1d(low.k, high.k)
    a, b = low.subset(ks), high.subset(ks)
    z = bla_change_scores(a, b)
    if majority is None:
        hit = int(np.sum(z > z_threshold)) >= min_bins
    else:
        hit = _weighted_vote(z > z_threshold, (np.abs(a.g_bla) + np.abs(b.g_bla)) / 2) > majority
    return ("yes" if hit else "no"), z
