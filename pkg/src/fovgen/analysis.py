"""Behavioral statistics: metamer rates, binned proportion-same curves,
forward stepwise regression with leave-one-out R^2 accounting, ablation
condition comparison, and the simulated observer used for CI runs."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from fovgen.errors import ConfigError, DomainError, EmptyInputError, GeometryError

TRIAL_CONDITIONS = ("own-fixation", "random", "original", "full", "foveal-only", "peripheral-only")
ABLATION_CONDITIONS = ("original", "full", "peripheral-only", "foveal-only")


@dataclass
class Judgment:
    pair_id: str
    condition: str
    response: str  # "same" | "different"
    response_time_ms: float = 0.0

    def __post_init__(self):
        if self.condition not in TRIAL_CONDITIONS:
            raise ConfigError(f"unknown condition {self.condition!r}")
        if self.response not in ("same", "different"):
            raise DomainError(f"response must be same/different, got {self.response!r}")


@dataclass
class JudgmentTable:
    rows: list = field(default_factory=list)

    def add(self, *args, **kwargs):
        self.rows.append(Judgment(*args, **kwargs))

    def restrict(self, condition: str) -> "JudgmentTable":
        return JudgmentTable([r for r in self.rows if r.condition == condition])

    def conditions(self):
        return sorted({r.condition for r in self.rows})

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for r in self.rows:
                f.write(
                    json.dumps(
                        {
                            "pair_id": r.pair_id,
                            "condition": r.condition,
                            "response": r.response,
                            "response_time_ms": r.response_time_ms,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )

    @classmethod
    def from_jsonl(cls, path) -> "JudgmentTable":
        rows = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    d = json.loads(line)
                    rows.append(
                        Judgment(d["pair_id"], d["condition"], d["response"], d.get("response_time_ms", 0.0))
                    )
        return cls(rows)


def metamer_rate(table: JudgmentTable, condition: str) -> float:
    """Fraction of "same" responses within a condition (exact counts)."""
    rows = [r for r in table.rows if r.condition == condition]
    if not rows:
        raise EmptyInputError(f"no rows for condition {condition!r}")
    return sum(r.response == "same" for r in rows) / len(rows)


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054):
    """95% Wilson score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1.0 + z**2 / n
    center = (p + z**2 / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass
class Bin:
    center: float
    proportion_same: float
    count: int
    ci_low: float
    ci_high: float
    low_n: bool  # flagged when fewer than 5 samples land in the bin


def bin_proportions(values, responses, n_bins: int = 6) -> list:
    """Equal-count (quantile) bins of a feature value vs proportion-same.

    ``responses`` are booleans or "same"/"different" strings.
    """
    values = np.asarray(values, dtype=np.float64)
    resp = np.asarray([r == "same" if isinstance(r, str) else bool(r) for r in responses])
    if values.shape != resp.shape:
        raise GeometryError("values and responses must have equal length")
    n = values.size
    if n_bins > n // 2:
        raise ConfigError(f"{n_bins} bins is too many for {n} samples")
    edges = np.quantile(values, np.linspace(0, 1, n_bins + 1))
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        sel = idx == b
        cnt = int(sel.sum())
        if cnt == 0:
            bins.append(Bin((edges[b] + edges[b + 1]) / 2, float("nan"), 0, 0.0, 1.0, True))
            continue
        same = int(resp[sel].sum())
        lo, hi = wilson_interval(same, cnt)
        bins.append(Bin(float(values[sel].mean()), same / cnt, cnt, lo, hi, cnt < 5))
    assert sum(b.count for b in bins) == n
    return bins


# ---------------------------------------------------------------------------
# forward stepwise regression


@dataclass
class RegressionResult:
    selected: list            # variable indices in entry order
    names: list               # column names in entry order
    coefficients: np.ndarray  # standardized-scale coefficients incl. intercept last
    r_squared: float
    delta_r2: dict            # name -> full-model R^2 minus R^2 without it


def _ols_r2(x, y):
    """R^2 of least-squares fit of y on x (with intercept column appended)."""
    n = x.shape[0]
    xd = np.column_stack([x, np.ones(n)])
    coef, *_ = np.linalg.lstsq(xd, y, rcond=None)
    resid = y - xd @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return r2, coef, ss_res


def stepwise_regression(x: np.ndarray, y, entry_p: float = 0.05, names=None) -> RegressionResult:
    """Forward selection on an OLS linear probability model.

    At each step the candidate with the largest R^2 gain enters if its
    partial-F p-value is below ``entry_p``; exactly-collinear candidates are
    skipped; selection stops when no candidate qualifies.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray([v == "same" if isinstance(v, str) else float(v) for v in y], dtype=np.float64)
    n, p = x.shape
    if y.shape[0] != n:
        raise GeometryError("x and y disagree on sample count")
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    # standardize columns; constant columns are never selectable
    mu, sd = x.mean(axis=0), x.std(axis=0)
    usable = sd > 1e-12
    xs = np.where(usable, (x - mu) / np.where(usable, sd, 1.0), 0.0)

    selected: list[int] = []
    current_r2, current_ss = 0.0, float(((y - y.mean()) ** 2).sum())
    ss_tot = current_ss
    while True:
        best = None
        for j in range(p):
            if j in selected or not usable[j]:
                continue
            cols = xs[:, selected + [j]]
            if np.linalg.matrix_rank(np.column_stack([cols, np.ones(n)])) < len(selected) + 2:
                continue  # exactly collinear with the current model
            r2, _, ss_res = _ols_r2(cols, y)
            if best is None or r2 > best[1]:
                best = (j, r2, ss_res)
        if best is None:
            break
        j, r2_new, ss_new = best
        k_new = len(selected) + 1
        df_den = n - k_new - 1
        if df_den <= 0 or ss_new <= 0:
            break
        f_stat = (current_ss - ss_new) / (ss_new / df_den)
        p_val = float(stats.f.sf(f_stat, 1, df_den))
        if p_val >= entry_p:
            break
        selected.append(j)
        current_r2, current_ss = r2_new, ss_new

    r2_full, coef, _ = _ols_r2(xs[:, selected], y) if selected else (0.0, np.array([y.mean()]), None)
    delta = {}
    for j in selected:
        rest = [s for s in selected if s != j]
        r2_rest, _, _ = _ols_r2(xs[:, rest], y) if rest else (0.0, None, None)
        delta[names[j]] = r2_full - r2_rest
    return RegressionResult(
        selected=selected,
        names=[names[j] for j in selected],
        coefficients=np.asarray(coef),
        r_squared=r2_full,
        delta_r2=delta,
    )


# ---------------------------------------------------------------------------
# ablation statistics


def two_proportion_z(s1: int, n1: int, s2: int, n2: int):
    """Pooled two-proportion z-test; returns (z, two-sided p)."""
    if n1 == 0 or n2 == 0:
        raise EmptyInputError("both samples must be non-empty")
    p1, p2 = s1 / n1, s2 / n2
    pool = (s1 + s2) / (n1 + n2)
    se = np.sqrt(pool * (1 - pool) * (1 / n1 + 1 / n2))
    if se == 0:
        return 0.0, 1.0
    z = (p1 - p2) / se
    return float(z), float(2 * stats.norm.sf(abs(z)))


def ablation_report(table: JudgmentTable) -> dict:
    """Metamer rates for the four ablation conditions plus pairwise tests."""
    missing = [c for c in ABLATION_CONDITIONS if not any(r.condition == c for r in table.rows)]
    if missing:
        raise ConfigError(f"missing ablation conditions: {missing}")
    counts = {}
    for c in ABLATION_CONDITIONS:
        rows = [r for r in table.rows if r.condition == c]
        counts[c] = (sum(r.response == "same" for r in rows), len(rows))
    rates = {c: s / n for c, (s, n) in counts.items()}
    tests = {}
    for i, a in enumerate(ABLATION_CONDITIONS):
        for b in ABLATION_CONDITIONS[i + 1 :]:
            z, pv = two_proportion_z(*counts[a], *counts[b])
            tests[f"{a}|{b}"] = {"z": z, "p": pv}
    return {"rates": rates, "counts": counts, "tests": tests}


def simulated_observer(orig_embed, gen_embed, tau: float, noise_sigma: float, rng) -> str:
    """CI stand-in for a participant: respond "same" when the semantic
    distance plus Gaussian decision noise falls below the threshold."""
    from fovgen.metrics import embed_distance

    d = embed_distance(orig_embed, gen_embed)
    return "same" if d + noise_sigma * rng.standard_normal() < tau else "different"
