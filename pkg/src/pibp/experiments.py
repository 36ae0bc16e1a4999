"""Synthetic paired-comparison experiments: pIBP versus IBP under
leave-one-pair-out cross-validation.

Data come from the three-category tree built by :func:`figure2_tree`. Each
dataset id fixes a true feature matrix and weights; every observation level
then draws its own binomial counts from the same true choice matrix.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations

import numpy as np

from .eba import (ChoiceData, DEFAULT_EPSILON, choice_matrix, collapse_columns, full_features,
                  noisy_prob, predictive_loglik)
from .fastchain import run_eba_chain
from .prior import sample_generative
from .sampler import SamplerConfig
from .tree import PhyloTree, star_tree

CATEGORY_NAMES = ("p", "a", "m")
RESULT_HEADER = ["model", "ell", "obs_level", "dataset", "pair_i", "pair_j", "pred_loglik"]
SUMMARY_HEADER = ["model", "ell", "obs_level", "mean", "stderr", "n_datasets",
                  "mean_per_obs", "stderr_per_obs"]
PAPER_LEVELS = [1, 5, 10, 15, 25, 50, 100, 500, 1000]


def figure2_tree(ell):
    """Nine people in three categories of three.

    Category edges have length ``1 - ell`` and leaf edges ``ell``; at
    ``ell = 1`` the category nodes vanish and the tree is the 9-leaf star.
    """
    if not 0.0 < ell <= 1.0:
        raise ValueError(f"ell must lie in (0, 1], got {ell}")
    names = [f"{c}{k}" for c in CATEGORY_NAMES for k in range(1, 4)]
    if ell == 1.0:
        return star_tree(9, names)
    parent = np.empty(13, dtype=np.int64)
    length = np.empty(13)
    for leaf in range(9):
        parent[leaf] = 9 + leaf // 3
        length[leaf] = ell
    parent[9:12] = 12
    length[9:12] = 1.0 - ell
    parent[12] = -1
    length[12] = 0.0
    return PhyloTree(parent, length, tuple(names))


# --- configuration ---------------------------------------------------------


@dataclass
class ExperimentConfig:
    ell_values: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    obs_levels: list = field(default_factory=lambda: [1, 10, 100])
    n_datasets: int = 5
    chains: int = 2
    iterations: int = 600
    burn_in: int = 200
    thin: int = 10
    data_seed: int = 0
    chain_seed: int = 1
    alpha_data: float = 2.0
    epsilon: float = DEFAULT_EPSILON
    data_ell: float = 0.1
    include_ibp: bool = True

    REQUIRED = ("ell_values", "obs_levels", "n_datasets", "chains", "iterations", "burn_in",
                "thin", "data_seed", "chain_seed")

    def __post_init__(self):
        self.ell_values = [float(x) for x in self.ell_values]
        self.obs_levels = [int(x) for x in self.obs_levels]
        if not self.obs_levels or any(b <= a for a, b in zip(self.obs_levels, self.obs_levels[1:])):
            raise ValueError("obs_levels must be a non-empty ascending list")
        if self.obs_levels[0] < 1:
            raise ValueError("observation levels must be positive")
        if self.n_datasets < 1 or self.chains < 1:
            raise ValueError("n_datasets and chains must be at least 1")
        if any(not 0.0 < e <= 1.0 for e in self.ell_values):
            raise ValueError("ell values must lie in (0, 1]")
        if self.alpha_data <= 0:
            raise ValueError("alpha_data must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        SamplerConfig(self.iterations, self.burn_in, self.thin)

    @classmethod
    def paper_scale(cls, **overrides):
        base = dict(n_datasets=15, obs_levels=list(PAPER_LEVELS), chains=3, iterations=3000,
                    burn_in=1000, thin=10)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise KeyError(f"unknown config key: {key}")
        for key in cls.REQUIRED:
            if key not in doc:
                raise KeyError(f"missing config key: {key}")
        return cls(**doc)

    def models(self):
        out = [("pibp", e) for e in self.ell_values]
        if self.include_ibp:
            out.append(("ibp", None))
        return out

    def sampler_config(self, seed):
        return SamplerConfig(self.iterations, self.burn_in, self.thin, seed=int(seed))


def parse_config_text(text):
    """Parse a config file: a JSON object, or ``key = value`` lines.

    In the line format ``#`` starts a comment and every value is read as
    JSON (so lists are ``[1, 10, 100]`` and booleans ``true``/``false``).
    """
    stripped = text.strip()
    if stripped.startswith("{"):
        return json.loads(stripped)
    doc = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            doc[key] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {value}") from exc
    return doc


def load_config(path, paper_scale=False):
    with open(path) as fh:
        doc = parse_config_text(fh.read())
    if paper_scale:
        base = ExperimentConfig.paper_scale().to_dict()
        base.update(doc)
        doc = base
    return ExperimentConfig.from_dict(doc)


def model_label(model, ell):
    return "IBP" if model == "ibp" else f"pIBP({ell:g})"


def model_tree(model, ell):
    return None if model == "ibp" else figure2_tree(ell)


def cell_seed(*coords):
    """Stable 32-bit seed from integer cell coordinates."""
    return int(np.random.SeedSequence([int(c) for c in coords]).generate_state(1)[0])


def _model_code(model, ell):
    return (0, 0) if model == "ibp" else (1, int(round(ell * 1000)))


# --- data ---------------------------------------------------------------------


@dataclass
class TrueModel:
    z: np.ndarray
    unique_weights: np.ndarray
    shared_weights: np.ndarray
    P: np.ndarray
    epsilon: float

    @property
    def z_full(self):
        return full_features(self.z)

    @property
    def weights(self):
        return np.concatenate([self.unique_weights, self.shared_weights])


def sample_true_model(tree, alpha, epsilon, rng):
    z = sample_generative(tree, alpha, rng).bits
    wu = rng.gamma(1.0, 1.0, tree.n_leaves)
    w = rng.gamma(1.0, 1.0, z.shape[1])
    P = noisy_prob(choice_matrix(full_features(z), np.concatenate([wu, w])), epsilon)
    return TrueModel(z, wu, w, P, float(epsilon))


def draw_choices(P, obs_per_pair, rng):
    """Binomial counts for every unordered pair, ``obs_per_pair`` trials each."""
    if obs_per_pair < 1:
        raise ValueError("obs_per_pair must be at least 1")
    n = P.shape[0]
    x = np.zeros((n, n), dtype=np.int64)
    for i, j in combinations(range(n), 2):
        x[i, j] = rng.binomial(obs_per_pair, P[i, j])
        x[j, i] = obs_per_pair - x[i, j]
    return ChoiceData(x)


def generate_dataset(tree, alpha, epsilon, obs_per_pair, rng):
    """True (Z, weights, P) from the prior plus one set of choice counts."""
    truth = sample_true_model(tree, alpha, epsilon, rng)
    return truth, draw_choices(truth.P, obs_per_pair, rng)


def experiment_datasets(config):
    """Truth per dataset id and counts per (dataset, level), all from data_seed."""
    tree = figure2_tree(config.data_ell)
    truths, data = [], {}
    for d in range(config.n_datasets):
        truth = sample_true_model(tree, config.alpha_data, config.epsilon,
                                  np.random.default_rng([config.data_seed, d]))
        truths.append(truth)
        for level in config.obs_levels:
            rng = np.random.default_rng([config.data_seed, d, level])
            data[d, level] = draw_choices(truth.P, level, rng)
    return truths, data


# --- cross-validation -----------------------------------------------------------


@dataclass
class PairResult:
    pair_i: int
    pair_j: int
    pred_loglik: float
    mean_k_plus: float
    error: str = ""


def loocv_run(data, tree, config, seed_coords=(0,), pairs=None):
    """Leave-one-pair-out predictive log-likelihoods.

    ``tree=None`` selects the IBP. Every unordered pair (or those in
    ``pairs``) is held out in turn; its counts are removed from the training
    data and scored with the retained samples of ``config.chains`` chains.
    """
    n = data.n_objects
    pairs = list(combinations(range(n), 2)) if pairs is None else pairs
    out = []
    for i, j in pairs:
        train = data.without_pair(i, j)
        assert train.wins[i, j] == 0 and train.wins[j, i] == 0
        try:
            probs, ks = [], []
            for c in range(config.chains):
                seed = cell_seed(*seed_coords, i, j, c)
                res = run_eba_chain(tree, train, config.sampler_config(seed),
                                    epsilon=config.epsilon, heldout=(i, j))
                probs.append(res.pair_probs)
                ks.append(res.k_plus)
            score = predictive_loglik(np.concatenate(probs), int(data.wins[i, j]),
                                      int(data.wins[j, i]))
            out.append(PairResult(i, j, score, float(np.concatenate(ks).mean())))
        except Exception as exc:  # one failed cell must not sink the sweep
            out.append(PairResult(i, j, float("nan"), float("nan"), repr(exc)))
    return out


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def add(self, model, ell, level, dataset, pair):
        self.rows.append({"model": model, "ell": "" if ell is None else ell,
                          "obs_level": level, "dataset": dataset, "pair_i": pair.pair_i,
                          "pair_j": pair.pair_j, "pred_loglik": pair.pred_loglik,
                          "mean_k_plus": pair.mean_k_plus, "error": pair.error})

    def sorted(self, config):
        order = {m: k for k, m in enumerate(config.models())}

        def key(r):
            ell = None if r["ell"] == "" else float(r["ell"])
            return (order[r["model"], ell], int(r["obs_level"]), int(r["dataset"]),
                    int(r["pair_i"]), int(r["pair_j"]))
        return ResultTable(sorted(self.rows, key=key))

    def values(self, model, ell, level):
        """Per-dataset mean predictive log-likelihood, indexed by dataset id."""
        per = {}
        for r in self.rows:
            r_ell = None if r["ell"] == "" else float(r["ell"])
            if r["model"] == model and r_ell == ell and int(r["obs_level"]) == level:
                per.setdefault(int(r["dataset"]), []).append(float(r["pred_loglik"]))
        return {d: float(np.mean(v)) for d, v in sorted(per.items())}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RESULT_HEADER)
            for r in self.rows:
                w.writerow([r[h] for h in RESULT_HEADER])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            r["pred_loglik"] = float(r["pred_loglik"])
        return cls(rows)


def summarize(table, config):
    """Mean and standard error across datasets, per model and level."""
    out = []
    for model, ell in config.models():
        for level in config.obs_levels:
            vals = np.array([v for v in table.values(model, ell, level).values()
                             if np.isfinite(v)])
            n = vals.size
            mean = float(vals.mean()) if n else float("nan")
            se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
            out.append({"model": model, "ell": "" if ell is None else ell, "obs_level": level,
                        "mean": mean, "stderr": se, "n_datasets": n,
                        "mean_per_obs": mean / level, "stderr_per_obs": se / level})
    return out


def ranking(summary, level):
    """Model labels at one level, best mean predictive log-likelihood first."""
    rows = [r for r in summary if r["obs_level"] == level]
    rows.sort(key=lambda r: -r["mean"])
    return [model_label(r["model"], None if r["ell"] == "" else r["ell"]) for r in rows]


def write_figure4(summary, config, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for model, ell in config.models():
        rows = [r for r in summary if r["model"] == model
                and (r["ell"] == "" if ell is None else r["ell"] == ell)]
        x = np.log10([r["obs_level"] for r in rows])
        y = np.array([r["mean_per_obs"] for r in rows])
        e = np.array([r["stderr_per_obs"] for r in rows])
        ax.errorbar(x, y, yerr=np.nan_to_num(e), marker="o", capsize=3,
                    label=model_label(model, ell))
    ax.set_xlabel("log10 observations per pair")
    ax.set_ylabel("predictive log-likelihood per observation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _run_block(job):
    model, ell, level, dataset, wins, cfg_doc = job
    config = ExperimentConfig(**cfg_doc)
    mc, ec = _model_code(model, ell)
    coords = (config.chain_seed, mc, ec, level, dataset)
    pairs = loocv_run(ChoiceData(np.array(wins)), model_tree(model, ell), config, coords)
    return model, ell, level, dataset, pairs


def _write_datasets(out_dir, config, truths, data):
    ddir = os.path.join(out_dir, "datasets")
    os.makedirs(ddir, exist_ok=True)
    tree = figure2_tree(config.data_ell)
    for d, truth in enumerate(truths):
        doc = {"dataset": d, "tree": tree.to_newick(), "epsilon": truth.epsilon,
               "z": truth.z.tolist(), "unique_weights": truth.unique_weights.tolist(),
               "shared_weights": truth.shared_weights.tolist(), "P": truth.P.tolist(),
               "wins": {str(level): data[d, level].wins.tolist() for level in config.obs_levels}}
        with open(os.path.join(ddir, f"dataset_{d}.json"), "w") as fh:
            json.dump(doc, fh)


def run_comparison(config, out_dir, jobs=1, resume=False, log=None):
    """Run the whole grid; writes results.csv, summary.csv, figure4.svg.

    Rows are appended block by block, so an interrupted run keeps every
    finished (model, level, dataset) block and ``resume=True`` skips them.
    """
    os.makedirs(out_dir, exist_ok=True)
    cfg_path = os.path.join(out_dir, "config.json")
    res_path = os.path.join(out_dir, "results.csv")
    diag_path = os.path.join(out_dir, "diagnostics.csv")
    if resume and os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            if json.load(fh) != config.to_dict():
                raise ValueError("resume requested but the config differs from the stored one")
    with open(cfg_path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=1)

    truths, data = experiment_datasets(config)
    _write_datasets(out_dir, config, truths, data)

    n_pairs = 36
    table = ResultTable()
    done = set()
    if resume and os.path.exists(res_path):
        table = ResultTable.read_csv(res_path)
        counts = {}
        for r in table.rows:
            ell = None if r["ell"] == "" else float(r["ell"])
            key = (r["model"], ell, int(r["obs_level"]), int(r["dataset"]))
            counts[key] = counts.get(key, 0) + 1
        done = {k for k, c in counts.items() if c == n_pairs}
        table.rows = [r for r in table.rows
                      if (r["model"], None if r["ell"] == "" else float(r["ell"]),
                          int(r["obs_level"]), int(r["dataset"])) in done]
        table.write_csv(res_path)
    else:
        table.write_csv(res_path)
        with open(diag_path, "w", newline="") as fh:
            csv.writer(fh).writerow(RESULT_HEADER[:-1] + ["mean_k_plus", "error"])

    todo = [(m, e, level, d, data[d, level].wins.tolist(), config.to_dict())
            for (m, e) in config.models() for level in config.obs_levels
            for d in range(config.n_datasets) if (m, e, level, d) not in done]

    def record(result):
        model, ell, level, dataset, pairs = result
        block = ResultTable()
        for p in pairs:
            block.add(model, ell, level, dataset, p)
        with open(res_path, "a", newline="") as fh:
            w = csv.writer(fh)
            for r in block.rows:
                w.writerow([r[h] for h in RESULT_HEADER])
        with open(diag_path, "a", newline="") as fh:
            w = csv.writer(fh)
            for r in block.rows:
                w.writerow([r[h] for h in RESULT_HEADER[:-1]] + [r["mean_k_plus"], r["error"]])
        table.rows.extend(block.rows)
        if log is not None:
            log(f"done {model_label(model, ell)} level={level} dataset={dataset}")

    if jobs <= 1:
        for job in todo:
            record(_run_block(job))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for result in pool.map(_run_block, todo):
                record(result)

    table = table.sorted(config)
    table.write_csv(res_path)
    summary = summarize(table, config)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_HEADER)
        w.writeheader()
        w.writerows(summary)
    write_figure4(summary, config, os.path.join(out_dir, "figure4.svg"))
    return table, summary


# --- posterior summaries -----------------------------------------------------------


@dataclass
class PosteriorSummary:
    """Collapsed columns averaged over samples, plus the mean choice matrix.

    ``z`` holds every canonical column seen in any sample; ``weights`` is its
    weight averaged over samples (zero where absent) and ``frequency`` the
    fraction of samples containing it.
    """

    z: np.ndarray
    weights: np.ndarray
    frequency: np.ndarray
    mean_P: np.ndarray

    def retained(self, threshold=0.1):
        keep = self.weights >= threshold
        return self.z[:, keep], self.weights[keep]

    def to_dict(self, threshold=0.1):
        z, w = self.retained(threshold)
        return {"mean_Z": z.tolist(), "mean_w": w.tolist(), "mean_P": self.mean_P.tolist()}


def mean_posterior_summary(samples, epsilon=DEFAULT_EPSILON):
    """Average collapsed [unique | shared] features and noisy choice matrices.

    ``samples`` are (z_shared, shared_weights, unique_weights) triples.
    """
    if not samples:
        raise ValueError("no samples to summarise")
    totals, seen = {}, {}
    mean_P = None
    for z, w, wu in samples:
        zf = full_features(np.asarray(z, dtype=np.int8))
        wf = np.concatenate([wu, w])
        P = noisy_prob(choice_matrix(zf, wf), epsilon)
        mean_P = P if mean_P is None else mean_P + P
        zc, wc = collapse_columns(zf, wf, threshold=0.0)
        for k in range(zc.shape[1]):
            key = tuple(int(b) for b in zc[:, k])
            totals[key] = totals.get(key, 0.0) + wc[k]
            seen[key] = seen.get(key, 0) + 1
    s = len(samples)
    keys = sorted(totals, key=lambda key: tuple(-b for b in key))
    n = len(keys[0]) if keys else np.asarray(samples[0][0]).shape[0]
    z = np.array(keys, dtype=np.int8).T if keys else np.zeros((n, 0), dtype=np.int8)
    weights = np.array([totals[k] / s for k in keys])
    freq = np.array([seen[k] / s for k in keys])
    return PosteriorSummary(z, weights, freq, mean_P / s)


def posterior_samples(data, tree, config, seed_coords):
    """Recorded samples from ``config.chains`` chains on the full data."""
    out = []
    for c in range(config.chains):
        res = run_eba_chain(tree, data, config.sampler_config(cell_seed(*seed_coords, c)),
                            epsilon=config.epsilon, record=True)
        out.extend(res.samples)
    return out


def figure5_comparison(config, obs_level=100, ell=0.1, threshold=0.1):
    """Per dataset: posterior summaries of pIBP(ell) and IBP against the truth."""
    truths, _ = experiment_datasets(config)
    off = ~np.eye(9, dtype=bool)
    out = []
    for d, truth in enumerate(truths):
        data = draw_choices(truth.P, obs_level,
                            np.random.default_rng([config.data_seed, d, obs_level]))
        base = (config.chain_seed, 99, obs_level, d)
        pibp = mean_posterior_summary(
            posterior_samples(data, figure2_tree(ell), config, base + (1,)), config.epsilon)
        ibp = mean_posterior_summary(
            posterior_samples(data, None, config, base + (0,)), config.epsilon)
        out.append({"dataset": d, "truth": truth, "pibp": pibp, "ibp": ibp,
                    "pibp_mad": float(np.mean(np.abs(pibp.mean_P - truth.P)[off])),
                    "ibp_mad": float(np.mean(np.abs(ibp.mean_P - truth.P)[off])),
                    "pibp_columns": int(pibp.retained(threshold)[0].shape[1]),
                    "ibp_columns": int(ibp.retained(threshold)[0].shape[1])})
    return out
