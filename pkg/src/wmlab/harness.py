"""Experiment drivers: generation, detection, sweeps, diversity, calibration.

Everything is steered by one INI-style configuration file (sections and
keys documented in the README) overridable key-by-key from the command
line.  Outputs are line-delimited JSON for generations and versioned CSV
(`# wmlab-csv v1` header) for every table.  All randomness derives from
``(master_seed, prompt_index, repeat_index)`` so results are independent
of scheduling order.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import detectors, lm, metrics, oracle, samplers
from .errors import ConfigError, WatermarkLabError
from .hashing import HashConfig, ScoreSpec
from .metrics import ConstraintKind, SweepPoint
from .samplers import WatermarkConfig

CSV_HEADER = "# wmlab-csv v1"
GENERATIONS_FORMAT = "wmlab-gen-v1"
CONFIG_ENV_VAR = "WMLAB_CONFIG"

DEFAULT_GRIDS = {
    "red_green": [0.5, 1.0, 2.0, 4.0],
    "aar_kth": [0.0, 0.5, 1.0, 2.0],
    "chi2": [0.005, 0.01, 0.02, 0.04],
    "synthid": [1, 5, 15, 30],
    "ppl_hard": [0.25, 0.5, 1.0, 2.0],
    "ppl_soft": [0.0, 0.25, 0.5, 1.0],
}

DEFAULT_SPECS = {
    "red_green": "fixed_partition(0.5)",
    "aar_kth": "gumbel(0,1)",
    "chi2": "binomial(30,0.5)",
    "synthid": "bernoulli(0.5)",
    "ppl_hard": "binomial(30,0.5)",
    "ppl_soft": "gumbel(0,1)",
}


@dataclass
class ExperimentConfig:
    """Desk-scale defaults mirroring the reference setup; all overridable."""

    corpus: str = ""
    order: int = 3
    smoothing: float = 0.1
    level: str = "byte"
    key: int = 99162322_77152121
    context_width: int = 4
    temperature: float = 0.7
    top_k: int = 50
    max_tokens: int = 200
    prompt_length: int = 16
    master_seed: int = 7
    alpha: float = 0.01
    fpr: float = 0.01
    null_mode: str = "analytic"
    mc_samples: int = 128
    sweep_prompts: int = 1000
    diversity_prompts: int = 100
    diversity_repeats: int = 100
    calibrate_sequences: int = 1000
    schemes: tuple[str, ...] = tuple(samplers.SCHEMES)
    grids: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GRIDS.items()})
    spec_strings: dict = field(default_factory=lambda: dict(DEFAULT_SPECS))

    def score_spec(self, scheme: str) -> ScoreSpec:
        try:
            return ScoreSpec.parse(self.spec_strings[scheme])
        except (KeyError, WatermarkLabError) as exc:
            raise ConfigError(f"bad score spec for {scheme}: {exc}") from exc

    def watermark_config(self, scheme: str, strength: float) -> WatermarkConfig | None:
        if scheme == "none":
            return None
        spec = self.score_spec(scheme)
        if scheme in ("red_green", "aar_kth", "chi2"):
            return WatermarkConfig(scheme, spec, delta=float(strength), mc_samples=self.mc_samples)
        if scheme in ("ppl_hard", "ppl_soft"):
            return WatermarkConfig(scheme, spec, epsilon=float(strength), mc_samples=self.mc_samples)
        if scheme == "synthid":
            return WatermarkConfig(scheme, spec, layers=int(strength), mc_samples=self.mc_samples)
        raise ConfigError(f"unknown scheme {scheme!r}")

    def hash_config(self, scheme: str, strength: float = 0.0) -> HashConfig:
        layers = int(strength) if scheme == "synthid" else 1
        return HashConfig(key=self.key, context_width=self.context_width, layer_count=layers)

    def sampling_config(self) -> lm.SamplingConfig:
        return lm.SamplingConfig(self.temperature, self.top_k, self.max_tokens)


_INT_KEYS = {
    "order", "key", "context_width", "top_k", "max_tokens", "prompt_length",
    "master_seed", "mc_samples", "sweep_prompts", "diversity_prompts",
    "diversity_repeats", "calibrate_sequences",
}
_FLOAT_KEYS = {"smoothing", "temperature", "alpha", "fpr"}
_STR_KEYS = {"corpus", "level", "null_mode"}


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read the INI config (or env default) and apply flat overrides.

    Sections are organizational only; keys are globally unique.  Scheme
    grids live under ``[schemes]`` as ``<scheme> = s1,s2,...`` with
    ``<scheme>_spec = family(params)``.
    """
    cfg = ExperimentConfig()
    path = path or os.environ.get(CONFIG_ENV_VAR)
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path!r}")
        flat: dict[str, str] = {}
        for section in parser.sections():
            for key, value in parser.items(section):
                flat[key] = value
        cfg = _apply(cfg, flat)
    if overrides:
        cfg = _apply(cfg, {k: v for k, v in overrides.items() if v is not None})
    return cfg


def _apply(cfg: ExperimentConfig, flat: dict) -> ExperimentConfig:
    grids = {k: list(v) for k, v in cfg.grids.items()}
    spec_strings = dict(cfg.spec_strings)
    updates: dict = {}
    try:
        for key, value in flat.items():
            if key in _INT_KEYS:
                updates[key] = int(value)
            elif key in _FLOAT_KEYS:
                updates[key] = float(value)
            elif key in _STR_KEYS:
                updates[key] = str(value)
            elif key == "schemes":
                names = value if isinstance(value, (list, tuple)) else [s.strip() for s in str(value).split(",") if s.strip()]
                for name in names:
                    if name not in samplers.SCHEMES:
                        raise ConfigError(f"unknown scheme {name!r}")
                updates["schemes"] = tuple(names)
            elif key.endswith("_spec") and key[:-5] in samplers.SCHEMES:
                spec_strings[key[:-5]] = str(value)
            elif key in samplers.SCHEMES:
                values = value if isinstance(value, (list, tuple)) else [float(s) for s in str(value).split(",") if s.strip()]
                grids[key] = [float(v) for v in values]
            else:
                raise ConfigError(f"unknown config key {key!r}")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    return replace(cfg, grids=grids, spec_strings=spec_strings, **updates)


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------


def load_corpus(cfg: ExperimentConfig) -> str:
    if not cfg.corpus:
        raise ConfigError("no corpus path configured")
    try:
        with open(cfg.corpus, "r", encoding="utf-8", errors="replace") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read corpus {cfg.corpus!r}: {exc}") from exc


def build_model(cfg: ExperimentConfig) -> lm.MarkovModel:
    return lm.train(load_corpus(cfg), order=cfg.order, smoothing=cfg.smoothing, level=cfg.level)


def sample_prompts(model: lm.MarkovModel, cfg: ExperimentConfig, count: int) -> list[tuple[int, ...]]:
    """Deterministic corpus-prefix prompts of ``prompt_length`` tokens."""
    corpus_ids = np.asarray(model.encode(load_corpus(cfg)), dtype=np.int64)
    span = max(cfg.prompt_length, cfg.context_width)
    if corpus_ids.size <= span:
        raise ConfigError("corpus too short to sample prompts")
    rng = np.random.default_rng((cfg.master_seed, 0x70726F6D))  # prompt-stream domain tag
    starts = rng.integers(0, corpus_ids.size - span, size=count)
    return [tuple(int(t) for t in corpus_ids[s : s + span]) for s in starts]


def run_seed(cfg: ExperimentConfig, prompt_index: int, repeat_index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence((cfg.master_seed, prompt_index, repeat_index))


def generate_records(
    model: lm.MarkovModel,
    cfg: ExperimentConfig,
    scheme: str,
    strength: float,
    count: int,
    repeat_index: int = 0,
) -> list[lm.GenerationRecord]:
    wm_cfg = cfg.watermark_config(scheme, strength)
    hash_cfg = cfg.hash_config(scheme, strength)
    sampling_cfg = cfg.sampling_config()
    prompts = sample_prompts(model, cfg, count)
    return [
        lm.generate(model, prompt, wm_cfg, hash_cfg, sampling_cfg, run_seed(cfg, i, repeat_index))
        for i, prompt in enumerate(prompts)
    ]


def _write_csv(path, columns: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def _csv_cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, scheme: str, strength: float, out_path, count: int | None = None) -> int:
    """Write one line-delimited JSON record per prompt, preceded by a meta line."""
    if scheme != "none" and scheme not in samplers.SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}")
    model = build_model(cfg)
    count = count if count is not None else cfg.sweep_prompts
    records = generate_records(model, cfg, scheme, strength, count)
    meta = {
        "format": GENERATIONS_FORMAT,
        "scheme": scheme,
        "strength": strength,
        "key": cfg.key,
        "context_width": cfg.context_width,
        "layers": int(strength) if scheme == "synthid" else 1,
        "score_spec": cfg.spec_strings.get(scheme, ""),
        "vocab_size": model.vocab.size,
        "master_seed": cfg.master_seed,
        "max_tokens": cfg.max_tokens,
        "count": count,
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for i, rec in enumerate(records):
            row = {
                "id": i,
                "prompt": list(rec.prompt),
                "tokens": list(rec.tokens),
                "lambda": rec.lam,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return len(records)


def read_generations(path) -> tuple[dict, list[dict]]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line for line in fh.read().splitlines() if line.strip()]
    except OSError as exc:
        raise ConfigError(f"cannot read generations file {path!r}: {exc}") from exc
    if not lines:
        raise ConfigError(f"generations file {path!r} is empty")
    meta = json.loads(lines[0])
    if meta.get("format") != GENERATIONS_FORMAT:
        raise ConfigError(f"{path!r} is not a {GENERATIONS_FORMAT} file")
    return meta, [json.loads(line) for line in lines[1:]]


def cmd_detect(
    gen_path,
    out_path,
    key: int | None = None,
    scheme: str | None = None,
    strength: float | None = None,
    spec_string: str | None = None,
    alpha: float = 0.01,
) -> list[detectors.DetectionResult]:
    """Detect every record of a generations file; one CSV row per sequence.

    Detection sees only the generated tokens (model-free): the scheme and
    key default to the file's metadata but both can be overridden, e.g. a
    mismatched key for null calibration.
    """
    meta, rows = read_generations(gen_path)
    scheme = scheme or meta["scheme"]
    if scheme == "none":
        raise ConfigError("unwatermarked file: pass an explicit scheme to detect against")
    strength = strength if strength is not None else float(meta["strength"])
    spec = ScoreSpec.parse(spec_string or meta["score_spec"] or DEFAULT_SPECS[scheme])
    layers = int(strength) if scheme == "synthid" else 1
    hash_cfg = HashConfig(
        key=key if key is not None else int(meta["key"]),
        context_width=int(meta["context_width"]),
        layer_count=layers,
    )
    if scheme in ("red_green", "aar_kth", "chi2"):
        wm_cfg = WatermarkConfig(scheme, spec, delta=strength)
    elif scheme in ("ppl_hard", "ppl_soft"):
        wm_cfg = WatermarkConfig(scheme, spec, epsilon=strength)
    else:
        wm_cfg = WatermarkConfig(scheme, spec, layers=layers)
    vocab_size = int(meta["vocab_size"])
    if not rows:
        raise ConfigError("no records to detect")
    results = []
    out_rows = []
    for row in rows:
        res = detectors.detect(row["tokens"], wm_cfg, hash_cfg, vocab_size, alpha=alpha)
        results.append(res)
        out_rows.append([row["id"], res.statistic, res.p_value, res.n_effective, res.decision])
    _write_csv(out_path, ["id", "statistic", "p_value", "n_effective", "decision"], out_rows)
    return results


def sweep_point(
    model: lm.MarkovModel,
    cfg: ExperimentConfig,
    scheme: str,
    strength: float,
    count: int,
    negatives: list[float] | None = None,
) -> SweepPoint:
    """Generate, detect, and measure one (scheme, strength) grid point."""
    records = generate_records(model, cfg, scheme, strength, count)
    wm_cfg = cfg.watermark_config(scheme, strength)
    hash_cfg = cfg.hash_config(scheme, strength)
    pvals = []
    for rec in records:
        seq = list(rec.prompt) + list(rec.tokens)
        pvals.append(detectors.detect(seq[len(rec.prompt) :], wm_cfg, hash_cfg, model.vocab.size, cfg.alpha).p_value)
    tpr = metrics.tpr_at_fpr(pvals, negatives, fpr=cfg.fpr)
    kinds = list(ConstraintKind)
    sums = {k: 0.0 for k in kinds}
    log_ppls = []
    for i, rec in enumerate(records):
        per = metrics.measure_constraints(rec, kinds, mc_samples=cfg.mc_samples, seed=(cfg.master_seed, 1, i))
        for k in kinds:
            sums[k] += per[k]
        log_ppls.append(np.log(lm.perplexity(model, rec.tokens, prefix=rec.prompt)))
    constraints = {k.value: sums[k] / len(records) for k in kinds}
    return SweepPoint(
        scheme=scheme,
        strength=float(strength),
        constraints=constraints,
        tpr=float(tpr),
        mean_log_ppl=float(np.mean(log_ppls)),
        n_sequences=len(records),
    )


def cmd_sweep(cfg: ExperimentConfig, out_path, count: int | None = None) -> list[SweepPoint]:
    """Full detectability/constraint sweep over every configured grid point."""
    model = build_model(cfg)
    count = count if count is not None else cfg.sweep_prompts
    null_records = None
    if cfg.null_mode == "empirical":
        null_records = generate_records(model, cfg, "none", 0.0, count)
    points = []
    for scheme in cfg.schemes:
        for strength in cfg.grids[scheme]:
            neg_pvals = None
            if null_records is not None:
                wm_cfg = cfg.watermark_config(scheme, strength)
                hash_cfg = cfg.hash_config(scheme, strength)
                neg_pvals = [
                    detectors.detect(rec.tokens, wm_cfg, hash_cfg, model.vocab.size, cfg.alpha).p_value
                    for rec in null_records
                ]
            points.append(sweep_point(model, cfg, scheme, strength, count, negatives=neg_pvals))
    columns = ["scheme", "strength", "tpr", "mean_log_ppl"] + [k.value for k in ConstraintKind] + ["n_sequences"]
    rows = [
        [pt.scheme, pt.strength, pt.tpr, pt.mean_log_ppl] + [pt.constraints[k.value] for k in ConstraintKind] + [pt.n_sequences]
        for pt in points
    ]
    _write_csv(out_path, columns, rows)
    return points


def cmd_diversity(cfg: ExperimentConfig, out_path, include_unwatermarked: bool = True) -> list[list]:
    """Per-scheme mean/std of per-prompt self-BLEU over repeated generations."""
    model = build_model(cfg)
    prompts = sample_prompts(model, cfg, cfg.diversity_prompts)
    sampling_cfg = cfg.sampling_config()
    rows = []
    jobs = [("none", 0.0)] if include_unwatermarked else []
    jobs += [(scheme, strength) for scheme in cfg.schemes for strength in cfg.grids[scheme]]
    for scheme, strength in jobs:
        wm_cfg = cfg.watermark_config(scheme, strength)
        hash_cfg = cfg.hash_config(scheme, strength)
        per_prompt = []
        for i, prompt in enumerate(prompts):
            texts = [
                lm.generate(model, prompt, wm_cfg, hash_cfg, sampling_cfg, run_seed(cfg, i, rep)).tokens
                for rep in range(cfg.diversity_repeats)
            ]
            per_prompt.append(metrics.self_bleu(texts, n=3))
        rows.append([scheme, float(strength), float(np.mean(per_prompt)), float(np.std(per_prompt))])
    _write_csv(out_path, ["scheme", "strength", "mean_self_bleu", "std_self_bleu"], rows)
    return rows


def cmd_calibrate(cfg: ExperimentConfig, out_path, alphas=(0.001, 0.01, 0.05), count: int | None = None) -> tuple[list[list], bool]:
    """Empirical false-positive rates of every scheme's detector on unwatermarked text.

    Returns the rows and an overall pass flag (FPR <= 2*alpha at every level).
    """
    model = build_model(cfg)
    count = count if count is not None else cfg.calibrate_sequences
    if count < 1:
        raise ConfigError("calibration needs at least one sequence")
    records = generate_records(model, cfg, "none", 0.0, count)
    rows = []
    ok = True
    for scheme in cfg.schemes:
        strength = cfg.grids[scheme][-1]
        wm_cfg = cfg.watermark_config(scheme, strength)
        hash_cfg = cfg.hash_config(scheme, strength)
        pvals = np.asarray(
            [detectors.detect(rec.tokens, wm_cfg, hash_cfg, model.vocab.size, cfg.alpha).p_value for rec in records]
        )
        for alpha in alphas:
            fpr = float(np.mean(pvals < alpha))
            rows.append([scheme, alpha, fpr, len(records)])
            if fpr > 2 * alpha:
                ok = False
    _write_csv(out_path, ["scheme", "alpha", "empirical_fpr", "n_sequences"], rows)
    return rows, ok


def cmd_oracle_check(max_vocab: int = 4, instances: int = 40, seed: int = 0, out=print) -> bool:
    """Run every closed-form-vs-oracle equivalence suite; print a gap table.

    Returns True when every suite's worst gap respects its bound.  The
    samplers are looked up through the module so a deliberately broken
    sampler (negative-control fixtures) is caught.
    """
    if max_vocab > 8:
        raise ConfigError("oracle checks are limited to vocabularies of size <= 8")
    grid_vocab = min(max_vocab, 4)
    rng = np.random.default_rng(seed)
    gaps = {
        "exponential_tilt_vs_grid": 0.0,
        "exponential_tilt_vs_feasible": 0.0,
        "water_filling_vs_grid": 0.0,
        "water_filling_vs_feasible": 0.0,
        "two_support_lp_vs_enumeration": 0.0,
        "two_support_lp_vs_feasible": 0.0,
        "tournament_chi2_identity": 0.0,
        "gumbel_argmax_distortion": 0.0,
    }
    bounds = {
        "exponential_tilt_vs_grid": 1e-3,
        "exponential_tilt_vs_feasible": 1e-7,
        "water_filling_vs_grid": 1e-3,
        "water_filling_vs_feasible": 1e-7,
        "two_support_lp_vs_enumeration": 1e-9,
        "two_support_lp_vs_feasible": 1e-7,
        "tournament_chi2_identity": 1e-12,
        "gumbel_argmax_distortion": 0.01,
    }
    from .core import ProbDist, validate_dist

    for i in range(instances):
        p = validate_dist(rng.dirichlet(np.ones(grid_vocab)))
        g = rng.normal(0.0, 1.0, grid_vocab)
        delta = float(rng.uniform(0.3, 2.0))

        q_rg = samplers.red_green(p, g, delta)
        obj = lambda q, kind, d: float(q.weights @ g) - oracle._penalty_rows(kind, q.weights[None, :], p.weights, d)[0]
        ref = oracle.grid_optimize_penalized(p, g, delta, ConstraintKind.HARD_KL)
        gaps["exponential_tilt_vs_grid"] = max(
            gaps["exponential_tilt_vs_grid"], obj(ref, ConstraintKind.HARD_KL, delta) - obj(q_rg, ConstraintKind.HARD_KL, delta)
        )
        budget = metrics.kl(q_rg, p)
        for q_f in oracle.feasible_random(p, ConstraintKind.HARD_KL, budget, 50, seed=(seed, i, 0)):
            gaps["exponential_tilt_vs_feasible"] = max(
                gaps["exponential_tilt_vs_feasible"], float(q_f.weights @ g) - float(q_rg.weights @ g)
            )

        delta_chi = float(rng.uniform(0.2, 1.0) / (g.max() - g.min() + 1e-9) * rng.choice([0.8, 2.0]))
        q_chi = samplers.chi2(p, g, delta_chi)
        ref = oracle.grid_optimize_penalized(p, g, delta_chi, ConstraintKind.CHI2)
        gaps["water_filling_vs_grid"] = max(
            gaps["water_filling_vs_grid"], obj(ref, ConstraintKind.CHI2, delta_chi) - obj(q_chi, ConstraintKind.CHI2, delta_chi)
        )
        budget = metrics.chi2_dist(q_chi, p)
        for q_f in oracle.feasible_random(p, ConstraintKind.CHI2, budget, 50, seed=(seed, i, 1)):
            gaps["water_filling_vs_feasible"] = max(
                gaps["water_filling_vs_feasible"], float(q_f.weights @ g) - float(q_chi.weights @ g)
            )

        epsilon = float(rng.uniform(0.05, 1.0))
        q_hard = samplers.ppl_hard(p, g, epsilon)
        q_lp = oracle.lp_vertex_oracle(p, g, epsilon)
        gaps["two_support_lp_vs_enumeration"] = max(
            gaps["two_support_lp_vs_enumeration"], float(q_lp.weights @ g) - float(q_hard.weights @ g)
        )
        for q_f in oracle.feasible_random(p, ConstraintKind.HARD_PPL, epsilon, 50, seed=(seed, i, 2)):
            gaps["two_support_lp_vs_feasible"] = max(
                gaps["two_support_lp_vs_feasible"], float(q_f.weights @ g) - float(q_hard.weights @ g)
            )

        gb = (rng.random(grid_vocab) < 0.5).astype(float)
        q_t = samplers.synthid_tournament(p, gb[None, :])
        q_c = samplers.chi2(p, gb, 1.0) if gb.max() > gb.min() else p
        gaps["tournament_chi2_identity"] = max(
            gaps["tournament_chi2_identity"], float(np.max(np.abs(q_t.weights - q_c.weights)))
        )

    p10 = validate_dist(rng.dirichlet(np.ones(10)))
    gap = oracle.check_distortion_free(
        lambda p_, g_: samplers.aar_kth(p_, g_, 0.0), p10, ScoreSpec.gumbel(0, 1), 100_000, seed=(seed, 99)
    )
    gaps["gumbel_argmax_distortion"] = gap

    ok = True
    out(f"{'suite':<36}{'worst_gap':>14}{'bound':>12}  pass")
    for name, worst in gaps.items():
        good = worst <= bounds[name]
        ok &= good
        out(f"{name:<36}{worst:>14.3e}{bounds[name]:>12.0e}  {'yes' if good else 'NO'}")
    return ok
