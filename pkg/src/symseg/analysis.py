"""Symbol-to-outcome statistics: per-position regressions and prefix mining.

For every sentence position, the symbol emitted there becomes a categorical
predictor (one-hot, rare levels pooled, reference level dropped) and is
regressed against each outcome: logistic for binary presence, multinomial
logistic for categorical outcomes, ordinary least squares for continuous
ones.  Fit quality is the squared Pearson correlation for continuous
outcomes and McFadden's pseudo-R^2 (1 - ll_model/ll_null, both unpenalized)
for categorical ones; the best-scoring position is reported per outcome
with ties resolved toward the earliest position.

Prefix mining reports, per class, maximal-length sentence prefixes that
cover at least ``min_coverage`` of the class and whose matches are at least
``min_purity`` pure for the class.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import synthdata

OTHER_LEVEL = "OTHER"
DEFAULT_L2 = 1e-4
LINEAR_JITTER = 1e-8


class JoinError(ValueError):
    """Sentence records and stats rows failed to join one-to-one."""


@dataclass
class JoinedRecord:
    sample_id: str
    slice_index: int
    ids: list[int]
    present: bool
    area: int
    eccentricity: float
    laterality: str
    location: str
    extra: dict[str, str] = field(default_factory=dict)


@dataclass
class SentenceLog:
    records: list[JoinedRecord]
    n_words: int


@dataclass
class LinearFit:
    coef: np.ndarray  # intercept first
    r2: float


@dataclass
class LogisticFit:
    coef: np.ndarray  # intercept first
    pseudo_r2: float
    ll_model: float
    ll_null: float
    n_iter: int
    converged: bool


@dataclass
class MultinomialFit:
    coef: np.ndarray  # (d+1) x (K-1), intercept row first; reference class dropped
    classes: list[str]
    pseudo_r2: float
    ll_model: float
    ll_null: float
    n_iter: int
    converged: bool


@dataclass
class RegressionReport:
    outcome: str
    model_kind: str  # linear | binary_logistic | multinomial_logistic
    statistics: list[tuple[int, float]]  # (position, fit statistic), 1-indexed
    best_position: int | None
    skipped: bool = False
    skip_reason: str = ""


@dataclass
class PatternEntry:
    prefix: tuple[int, ...]
    support: int
    coverage: float
    purity: float


@dataclass
class PatternSummary:
    per_class: dict[str, list[PatternEntry]]
    n_words: int


# ---------------------------------------------------------------------------
# loading and joining

def build_log(sentence_records: list[dict], stats_rows: list[dict[str, str]]
              ) -> SentenceLog:
    """Join sentence records to stats rows on (sample_id, slice)."""
    stats_by_key: dict[tuple[str, int], dict[str, str]] = {}
    for row in stats_rows:
        stats_by_key[(row["sample_id"], int(row["slice"]))] = row

    records = []
    unmatched = []
    lengths = set()
    for rec in sentence_records:
        key = (str(rec["sample_id"]), int(rec["slice_index"]))
        row = stats_by_key.get(key)
        if row is None:
            unmatched.append(key)
            continue
        ids = [int(v) for v in rec["ids"]]
        lengths.add(len(ids))
        extra = {k: v for k, v in row.items()
                 if k not in synthdata._BASE_COLUMNS and v != ""}
        records.append(JoinedRecord(
            sample_id=key[0], slice_index=key[1], ids=ids,
            present=row["present"] == "1",
            area=int(row["area"]),
            eccentricity=float(row["eccentricity"]),
            laterality=row["laterality"],
            location=row["location"],
            extra=extra,
        ))
    if unmatched:
        raise JoinError(
            f"{len(unmatched)} sentence record(s) have no stats row: "
            f"{unmatched[:5]}"
        )
    if not records:
        raise JoinError("empty sentence log")
    if len(lengths) != 1:
        raise JoinError(f"sentences disagree in length: {sorted(lengths)}")
    return SentenceLog(records, lengths.pop())


def load_log(sentences_path: str, stats_path: str) -> SentenceLog:
    from .channel import read_sentences

    with open(sentences_path) as fp:
        sentence_records = read_sentences(fp)
    stats_rows = synthdata.read_stats_csv(stats_path)
    return build_log(sentence_records, stats_rows)


# ---------------------------------------------------------------------------
# design matrix

def encode_position(ids_rows: list[list[int]], k: int, min_count: int
                    ) -> tuple[np.ndarray, list[str], str]:
    """One-hot design for the symbol at position k (1-indexed).

    Symbols occurring fewer than ``min_count`` times pool into OTHER; the
    most frequent level is the dropped reference.  Returns (X, column
    labels, reference label).
    """
    if not ids_rows:
        raise ValueError("empty sentence log")
    n_words = len(ids_rows[0])
    if not 1 <= k <= n_words:
        raise ValueError(f"position {k} outside 1..{n_words}")
    symbols = [row[k - 1] for row in ids_rows]
    counts = Counter(symbols)
    levels_of: dict[int, str] = {}
    pooled = 0
    for sym, cnt in counts.items():
        if cnt >= min_count:
            levels_of[sym] = str(sym)
        else:
            levels_of[sym] = OTHER_LEVEL
            pooled += cnt
    level_counts = Counter()
    for sym, cnt in counts.items():
        level_counts[levels_of[sym]] += cnt

    def order(item):
        label, cnt = item
        # most frequent first; ties by label with OTHER last
        return (-cnt, label == OTHER_LEVEL, label)

    ordered = [label for label, _ in sorted(level_counts.items(), key=order)]
    reference = ordered[0]
    columns = ordered[1:]
    col_index = {label: j for j, label in enumerate(columns)}
    x = np.zeros((len(symbols), len(columns)))
    for i, sym in enumerate(symbols):
        j = col_index.get(levels_of[sym])
        if j is not None:
            x[i, j] = 1.0
    return x, columns, reference


# ---------------------------------------------------------------------------
# model fits

def _with_intercept(x: np.ndarray) -> np.ndarray:
    return np.concatenate([np.ones((x.shape[0], 1)), np.asarray(x, dtype=float)], axis=1)


def fit_linear(x: np.ndarray, y: np.ndarray) -> LinearFit:
    """Least squares via normal equations with a small ridge jitter;
    r^2 is the squared Pearson correlation of fitted vs observed values."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError(f"bad design: X {x.shape}, y {y.shape}")
    if x.shape[0] < x.shape[1] + 1:
        raise ValueError(f"need at least {x.shape[1] + 1} rows, got {x.shape[0]}")
    x1 = _with_intercept(x)
    gram = x1.T @ x1 + LINEAR_JITTER * np.eye(x1.shape[1])
    coef = np.linalg.solve(gram, x1.T @ y)
    fitted = x1 @ coef
    return LinearFit(coef, _pearson_r2(fitted, y))


def _pearson_r2(a: np.ndarray, b: np.ndarray) -> float:
    sa = a - a.mean()
    sb = b - b.mean()
    denom = float(np.linalg.norm(sa)) * float(np.linalg.norm(sb))
    if denom == 0.0:
        return 0.0
    r = float(sa @ sb) / denom
    return min(1.0, r * r)


def _bernoulli_ll(z: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(y * z - np.logaddexp(0.0, z)))


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = DEFAULT_L2,
                 tol: float = 1e-8, max_iter: int = 100) -> LogisticFit:
    """Penalized binary logistic regression by Newton iterations.

    The intercept is unpenalized and initialized at the null MLE, and steps
    are only accepted when the penalized likelihood improves, so the
    reported pseudo-R^2 (from unpenalized likelihoods) is never negative.
    Falls back to damped gradient steps if the Newton system fails.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if set(np.unique(y)) - {0.0, 1.0}:
        raise ValueError("y must be binary 0/1")
    if len(np.unique(y)) < 2:
        raise ValueError("degenerate outcome: only one class present")
    x1 = _with_intercept(x)
    n, d1 = x1.shape
    pen_mask = np.ones(d1)
    pen_mask[0] = 0.0

    p_bar = float(y.mean())
    ll_null = n * (p_bar * np.log(p_bar) + (1 - p_bar) * np.log(1 - p_bar))

    beta = np.zeros(d1)
    beta[0] = np.log(p_bar / (1 - p_bar))

    def penalized_ll(b: np.ndarray) -> float:
        return _bernoulli_ll(x1 @ b, y) - 0.5 * l2 * float(np.sum(pen_mask * b * b))

    current = penalized_ll(beta)
    n_iter = 0
    converged = False
    for n_iter in range(1, max_iter + 1):
        z = x1 @ beta
        p = 1.0 / (1.0 + np.exp(-z))
        grad = x1.T @ (y - p) - l2 * pen_mask * beta
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        w = p * (1.0 - p)
        hess = x1.T @ (x1 * w[:, None]) + l2 * np.diag(pen_mask)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad / max(1.0, np.linalg.norm(grad))
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            value = penalized_ll(cand)
            if value > current:
                beta, current = cand, value
                break
            t *= 0.5
        else:
            converged = True  # no improving step left at this scale
            break
    ll_model = _bernoulli_ll(x1 @ beta, y)
    pseudo = 1.0 - ll_model / ll_null if ll_null != 0.0 else 0.0
    return LogisticFit(beta, max(0.0, pseudo), ll_model, ll_null, n_iter, converged)


def _multinomial_ll(x1: np.ndarray, coef: np.ndarray, y_idx: np.ndarray) -> float:
    logits = np.concatenate([np.zeros((x1.shape[0], 1)), x1 @ coef], axis=1)
    logits -= logits.max(axis=1, keepdims=True)
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return float(log_probs[np.arange(len(y_idx)), y_idx].sum())


def fit_multinomial(x: np.ndarray, labels: list[str], l2: float = DEFAULT_L2,
                    tol: float = 1e-8, max_iter: int = 2000) -> MultinomialFit:
    """Penalized multinomial logistic regression by gradient ascent with
    backtracking line search; reference class is the most frequent label."""
    x = np.asarray(x, dtype=float)
    counts = Counter(labels)
    if len(counts) < 2:
        raise ValueError("degenerate outcome: only one class present")
    classes = [c for c, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    class_idx = {c: i for i, c in enumerate(classes)}
    y_idx = np.array([class_idx[label] for label in labels])
    x1 = _with_intercept(x)
    n, d1 = x1.shape
    k = len(classes)

    pen_mask = np.ones((d1, k - 1))
    pen_mask[0, :] = 0.0
    coef = np.zeros((d1, k - 1))
    # Intercepts at the null MLE: log odds of each class vs the reference.
    for j, cls in enumerate(classes[1:]):
        coef[0, j] = np.log(counts[cls] / counts[classes[0]])
    props = np.array([counts[c] / n for c in classes])
    ll_null = float(n * np.sum(props * np.log(props)))

    onehot = np.zeros((n, k))
    onehot[np.arange(n), y_idx] = 1.0

    def penalized_ll(b: np.ndarray) -> float:
        return _multinomial_ll(x1, b, y_idx) - 0.5 * l2 * float(np.sum(pen_mask * b * b))

    current = penalized_ll(coef)
    step_scale = 1.0 / max(1.0, n)
    n_iter = 0
    converged = False
    for n_iter in range(1, max_iter + 1):
        logits = np.concatenate([np.zeros((n, 1)), x1 @ coef], axis=1)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        grad = x1.T @ (onehot[:, 1:] - probs[:, 1:]) - l2 * pen_mask * coef
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        t = step_scale * 4.0
        improved = False
        for _ in range(60):
            cand = coef + t * grad
            value = penalized_ll(cand)
            if value > current:
                coef, current, step_scale = cand, value, t
                improved = True
                break
            t *= 0.5
        if not improved:
            converged = True
            break
    ll_model = _multinomial_ll(x1, coef, y_idx)
    pseudo = 1.0 - ll_model / ll_null if ll_null != 0.0 else 0.0
    return MultinomialFit(coef, classes, max(0.0, pseudo), ll_model, ll_null,
                          n_iter, converged)


# ---------------------------------------------------------------------------
# per-outcome position sweep

def _outcome_specs(log: SentenceLog) -> list[tuple[str, str]]:
    specs = [
        ("Tumor", "binary_logistic"),
        ("Area", "linear"),
        ("Eccentricity", "linear"),
        ("Laterality", "multinomial_logistic"),
        ("Location", "multinomial_logistic"),
    ]
    extra_keys = sorted({k for r in log.records for k in r.extra})
    specs.extend((key, "multinomial_logistic") for key in extra_keys)
    return specs


def _outcome_rows(log: SentenceLog, outcome: str) -> tuple[list[list[int]], list]:
    if outcome == "Tumor":
        return [r.ids for r in log.records], [int(r.present) for r in log.records]
    present = [r for r in log.records if r.present]
    ids = [r.ids for r in present]
    if outcome == "Area":
        return ids, [float(r.area) for r in present]
    if outcome == "Eccentricity":
        return ids, [r.eccentricity for r in present]
    if outcome == "Laterality":
        return ids, [r.laterality for r in present]
    if outcome == "Location":
        return ids, [r.location for r in present]
    return ids, [r.extra.get(outcome, "") for r in present]


def table2_report(log: SentenceLog, min_count: int = 5) -> list[RegressionReport]:
    """Fit every outcome at every sentence position; pick the best position.

    Presence is fit on all records; every other outcome only on records
    where the region is present.  Outcomes with fewer than two observed
    levels (or no variance) are reported as skipped.
    """
    reports = []
    for outcome, kind in _outcome_specs(log):
        ids_rows, y = _outcome_rows(log, outcome)
        if kind == "linear":
            degenerate = len(ids_rows) < 2 or float(np.std(y)) == 0.0
        else:
            degenerate = len(set(y)) < 2
        if degenerate:
            reports.append(RegressionReport(outcome, kind, [], None, True,
                                            "fewer than two outcome levels"))
            continue
        stats: list[tuple[int, float]] = []
        for k in range(1, log.n_words + 1):
            x, _, _ = encode_position(ids_rows, k, min_count)
            if kind == "linear":
                stat = fit_linear(x, np.asarray(y, dtype=float)).r2
            elif kind == "binary_logistic":
                stat = fit_logistic(x, np.asarray(y, dtype=float)).pseudo_r2
            else:
                stat = fit_multinomial(x, [str(v) for v in y]).pseudo_r2
            stats.append((k, stat))
        values = [s for _, s in stats]
        best = stats[int(np.argmax(values))][0]  # argmax takes the earliest max
        reports.append(RegressionReport(outcome, kind, stats, best))
    return reports


# ---------------------------------------------------------------------------
# prefix mining

def mine_prefixes(ids_rows: list[list[int]], labels: list[str], max_k: int,
                  min_coverage: float, min_purity: float = 0.9) -> PatternSummary:
    """Per class, maximal-length prefixes with coverage >= min_coverage in the
    class and purity > min_purity over all records matching the prefix."""
    if len(ids_rows) != len(labels):
        raise ValueError("ids/labels length mismatch")
    if not ids_rows:
        return PatternSummary({}, 0)
    n_words = len(ids_rows[0])
    max_k = min(max_k, n_words)

    total: Counter = Counter()
    per_class: dict[str, Counter] = {}
    class_sizes: Counter = Counter(labels)
    for ids, label in zip(ids_rows, labels):
        bucket = per_class.setdefault(label, Counter())
        for k in range(1, max_k + 1):
            prefix = tuple(ids[:k])
            total[prefix] += 1
            bucket[prefix] += 1

    summary: dict[str, list[PatternEntry]] = {}
    for label in sorted(class_sizes):
        size = class_sizes[label]
        bucket = per_class[label]
        qualifying = {
            prefix for prefix, cnt in bucket.items()
            if cnt / size >= min_coverage and cnt / total[prefix] > min_purity
        }
        maximal = [
            prefix for prefix in qualifying
            if not any(len(q) == len(prefix) + 1 and q[:-1] == prefix
                       for q in qualifying)
        ]
        entries = [
            PatternEntry(prefix, bucket[prefix], bucket[prefix] / size,
                         bucket[prefix] / total[prefix])
            for prefix in maximal
        ]
        entries.sort(key=lambda e: (-e.coverage, e.prefix))
        summary[label] = entries
    return PatternSummary(summary, n_words)


def format_prefix(prefix: tuple[int, ...], n_words: int) -> str:
    parts = [str(i) for i in prefix]
    if len(prefix) < n_words:
        parts.append("*")
    return ", ".join(parts)


# ---------------------------------------------------------------------------
# report files

def write_table2_csv(path: str, reports: list[RegressionReport]) -> None:
    with open(path, "w") as fp:
        fp.write("outcome,model_kind,position,statistic,is_best\n")
        for rep in reports:
            if rep.skipped:
                continue
            for pos, stat in rep.statistics:
                best = 1 if pos == rep.best_position else 0
                fp.write(f"{rep.outcome},{rep.model_kind},{pos},{stat!r},{best}\n")


def write_patterns(path: str, summary: PatternSummary) -> None:
    with open(path, "w") as fp:
        for label in sorted(summary.per_class):
            for entry in summary.per_class[label]:
                pattern = format_prefix(entry.prefix, summary.n_words)
                fp.write(f"{label}\t{pattern}\t{entry.coverage!r}\t{entry.purity!r}\n")
