"""Pipeline orchestration and the experiment harnesses built on it."""

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .config import derive_seed, stage_rng
from .dataset import MULTI_LABEL, generate_synthetic, holdout_split, load_manifest, make_splits
from .errors import ConfigError, SscmrError, StageError, ValidationError
from .label_prediction import run_label_prediction
from .losses import positive_weights
from .representation import CrlData, CrlModel, encode, train_crl
from .retrieval import evaluate, format_table, parse_cutoff

log = logging.getLogger(__name__)

ABLATIONS = {
    "no_sim_dsim": ("alpha3", "alpha4"),
    "no_lab": ("alpha1",),
    "no_unlab": ("beta",),
    "no_cross": ("alpha2",),
    "full": (),
}
CONVENTIONS = {
    "ties": "equal similarity ranks by ascending database index",
    "zero_relevant": "queries without a relevant item contribute AP = 0",
}


@dataclass
class RunResult:
    report: dict
    lp_metrics: dict = field(default_factory=dict)
    lp_log: list = field(default_factory=list)
    crl_log: list = field(default_factory=list)
    noisy_x: np.ndarray = None
    noisy_y: np.ndarray = None


def load_data(config):
    """Return ``(train, test)`` datasets for a config."""
    ds = config.dataset
    if "synthetic" in ds:
        full = generate_synthetic(config.synthetic_spec())
        return holdout_split(full, ds.get("test_fraction", 0.4),
                             derive_seed(config.seed, "holdout"))
    train = load_manifest(ds["manifest"])
    test = load_manifest(ds["manifest"], section="test")
    if test is None:
        return holdout_split(train, ds.get("test_fraction", 0.3),
                             derive_seed(config.seed, "holdout"))
    return train, test


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SscmrError as exc:
        raise StageError(name, exc) from exc
    except (ValueError, ArithmeticError, OSError) as exc:
        raise StageError(name, exc) from exc


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_pipeline(config, out_dir=None, data=None):
    """Train LP (unless supervised), then CRL, then evaluate on the test set.

    With ``out_dir`` every artifact is written there, each carrying the
    config echo.  ``data`` may pass pre-loaded ``(train, test)`` datasets.
    """
    config.validate()
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    train, test = data if data is not None else _stage("load", load_data, config)
    semi = config.mode != "supervised"
    split = _stage("split", make_splits, train,
                   labeled_fraction=config.split.labeled_fraction,
                   nn_fraction=config.split.nn_fraction,
                   val_fraction=config.split.val_fraction,
                   unpaired=config.mode == "semi_unpaired",
                   seed=derive_seed(config.seed, "split"),
                   stratified=config.split.stratified)
    if config.mode == "semi_unpaired" and not split.unlabeled_x_idx.size + split.unlabeled_y_idx.size:
        raise StageError("split", ConfigError("semi_unpaired needs unlabeled data"))
    echo = config.to_dict()

    result = RunResult(report={})
    lab = split.labeled_idx
    crl_data = CrlData(train.features_x[:, lab], train.features_y[:, lab], train.labels[:, lab])
    if semi and (split.unlabeled_x_idx.size or split.unlabeled_y_idx.size):
        lp = _stage("lp", run_label_prediction, train, split, config.lp,
                    stage_rng(config.seed, "lp"))
        result.lp_metrics = lp.metrics
        result.lp_log = lp.state.log
        result.noisy_x, result.noisy_y = lp.noisy_x, lp.noisy_y
        crl_data.unlabeled_x = train.features_x[:, split.unlabeled_x_idx]
        crl_data.unlabeled_y = train.features_y[:, split.unlabeled_y_idx]
        crl_data.pred_x, crl_data.pred_y = lp.pred_x, lp.pred_y
        if out_dir:
            lp.net.save(os.path.join(out_dir, "lp"),
                        extra={"split_seed": derive_seed(config.seed, "split"), "config": echo})
            _write_csv(os.path.join(out_dir, "lp_log.csv"),
                       ["epoch", "train_loss", "val_accuracy"], lp.state.log)
            _write_csv(os.path.join(out_dir, "noisy_labels.csv"),
                       ["modality", "item"] + [f"c{j}" for j in range(train.d_c)],
                       _label_rows(split, lp.noisy_x, lp.noisy_y))
            _write_json(os.path.join(out_dir, "lp_metrics.json"),
                        {"metrics": lp.metrics, "config": echo})

    rng = stage_rng(config.seed, "crl")
    model = CrlModel(train.d_x, train.d_y, train.d_c, config.crl.hidden, train.label_mode, rng,
                     config.crl.hidden_activation)
    weights = positive_weights(crl_data.labels) if train.label_mode == MULTI_LABEL else None
    result.crl_log = _stage("crl", train_crl, model, crl_data, config.crl, rng, weights)

    result.report = _stage("eval", evaluate_model, model, test, config)
    if out_dir:
        model.save(os.path.join(out_dir, "crl"), extra={"config": echo})
        _write_csv(os.path.join(out_dir, "crl_log.csv"),
                   ["epoch", "L_lab", "L_cross", "L_sim", "L_dsim", "L_lab_hat", "total"],
                   result.crl_log)
        write_report(out_dir, result.report, config, result.lp_metrics)
    return result


def _label_rows(split, noisy_x, noisy_y):
    rows = [("x", int(i), *(int(v) for v in col)) for i, col in zip(split.unlabeled_x_idx, noisy_x.T)]
    rows += [("y", int(i), *(int(v) for v in col)) for i, col in zip(split.unlabeled_y_idx, noisy_y.T)]
    return rows


def evaluate_model(model, test, config):
    _, rx = encode(model, "x", test.features_x)
    _, ry = encode(model, "y", test.features_y)
    cutoffs = [parse_cutoff(c) for c in config.eval.cutoffs]
    return evaluate(rx, ry, test.labels, test.label_mode, cutoffs, config.eval.metric)


def write_report(out_dir, report, config, lp_metrics=None):
    payload = {"map": report, "config": config.to_dict(), "seed": config.seed,
               "conventions": CONVENTIONS}
    if lp_metrics:
        payload["lp"] = lp_metrics
    _write_json(os.path.join(out_dir, "report.json"), payload)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_table(report, f"Ours ({config.mode})"))
        for k, v in CONVENTIONS.items():
            fh.write(f"# {k}: {v}\n")


def reevaluate(run_dir):
    """Recompute the evaluation report of a finished ``train`` run from its artifacts."""
    from .config import config_from_dict

    with open(os.path.join(run_dir, "crl", "crl.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    config = config_from_dict(meta["config"])
    model = CrlModel.load(os.path.join(run_dir, "crl"))
    _, test = load_data(config)
    return evaluate_model(model, test, config), config


# ---------------------------------------------------------------------------
# harnesses


def sweep(config, fractions, seeds=(0,), out_dir=None):
    """MAP vs labeled fraction with and without the unlabeled remainder.

    Rows: ``(seed, fraction, variant, direction, map50, map_all)`` where
    ``variant`` is ``l`` (labeled only) or ``ul`` (with LP-labeled data).
    """
    for f in fractions:
        if not 0.0 < f < 1.0:
            raise ConfigError(f"sweep fraction {f} is outside (0, 1)")
    semi_mode = config.mode if config.mode != "supervised" else "semi_paired"
    rows = []
    for seed in seeds:
        for f in fractions:
            for variant in ("l", "ul"):
                cfg = config.replace(**{"seed": seed, "mode": semi_mode,
                                        "split.labeled_fraction": f,
                                        "crl.beta": config.crl.beta if variant == "ul" else 0.0})
                res = run_pipeline(cfg)
                for direction in ("I-Q", "T-Q", "Avg"):
                    r = res.report[direction]
                    rows.append((seed, f, variant, direction, r.get("50"), r.get("all")))
    header = ["seed", "fraction", "variant", "direction", "map50", "map_all"]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(os.path.join(out_dir, "sweep.csv"), header, rows)
        _write_json(os.path.join(out_dir, "sweep_config.json"),
                    {"config": config.to_dict(), "fractions": list(fractions), "seeds": list(seeds)})
    return header, rows


def ablate(config, toggles=None, seeds=(0,), out_dir=None):
    """One model per loss toggle; rows ``(toggle, seed, map50, map_all)`` of the Avg direction."""
    toggles = list(ABLATIONS) if toggles is None else list(toggles)
    for t in toggles:
        if t not in ABLATIONS:
            raise ValidationError(f"unknown ablation toggle {t!r}; expected one of {list(ABLATIONS)}")
    rows = []
    for t in toggles:
        for seed in seeds:
            changes = {"seed": seed}
            changes.update({f"crl.{w}": 0.0 for w in ABLATIONS[t]})
            res = run_pipeline(config.replace(**changes))
            rows.append((t, seed, res.report["Avg"].get("50"), res.report["Avg"].get("all")))
    header = ["toggle", "seed", "map50", "map_all"]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(os.path.join(out_dir, "ablation.csv"), header, rows)
        table = ablation_table(rows)
        _write_csv(os.path.join(out_dir, "ablation_table.csv"), ["toggle", "map50", "map_all"], table)
        _write_json(os.path.join(out_dir, "ablation_config.json"),
                    {"config": config.to_dict(), "toggles": toggles, "seeds": list(seeds)})
    return header, rows


def ablation_table(rows):
    """Seed-averaged ``(toggle, map50, map_all)`` rows in first-seen toggle order."""
    order, acc = [], {}
    for t, _, m50, mall in rows:
        if t not in acc:
            order.append(t)
            acc[t] = []
        acc[t].append((m50, mall))
    return [(t, float(np.mean([a for a, _ in acc[t]])), float(np.mean([b for _, b in acc[t]])))
            for t in order]


def lp_compare(config, losses=("l1", "bce", "wbce"), fractions=(0.2,), seeds=(0,), out_dir=None):
    """LP error (one minus :func:`lp_accuracy`) per loss and labeled fraction on multi-label data.

    Returns ``(header, rows)`` with rows ``(seed, fraction, noisy, *losses)``.
    """
    rows = []
    for seed in seeds:
        cfg0 = config.replace(seed=seed)
        train, test = load_data(cfg0)
        if train.label_mode != MULTI_LABEL:
            raise ValidationError("LP loss comparison needs multi-label data")
        for f in fractions:
            split = make_splits(train, labeled_fraction=f,
                                nn_fraction=config.split.nn_fraction,
                                val_fraction=config.split.val_fraction,
                                seed=derive_seed(seed, "split"),
                                stratified=config.split.stratified)
            errs, noisy = [], None
            for loss in losses:
                cfg = cfg0.replace(**{"lp.loss": loss})
                lp = run_label_prediction(train, split, cfg.lp, stage_rng(seed, "lp"))
                errs.append(1.0 - lp.metrics["lp_accuracy"])
                noisy = 1.0 - lp.metrics["noisy_accuracy"]
            rows.append((seed, f, noisy, *errs))
    header = ["seed", "fraction", "noisy"] + list(losses)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(os.path.join(out_dir, "lp_compare.csv"), header, rows)
        _write_json(os.path.join(out_dir, "lp_compare_config.json"),
                    {"config": config.to_dict(), "fractions": list(fractions),
                     "seeds": list(seeds), "losses": list(losses)})
    return header, rows


def lp_curve(config, fractions, seeds=(0,), unpaired=False):
    """Noisy-anchor vs LP accuracy on unlabeled training items per labeled fraction."""
    rows = []
    for seed in seeds:
        cfg = config.replace(seed=seed)
        train, _ = load_data(cfg)
        for f in fractions:
            split = make_splits(train, labeled_fraction=f,
                                nn_fraction=config.split.nn_fraction,
                                val_fraction=config.split.val_fraction, unpaired=unpaired,
                                seed=derive_seed(seed, "split"),
                                stratified=config.split.stratified)
            lp = run_label_prediction(train, split, cfg.lp, stage_rng(seed, "lp"))
            rows.append((seed, f, lp.metrics["noisy_accuracy"], lp.metrics["lp_accuracy"]))
    return ["seed", "fraction", "noisy_accuracy", "lp_accuracy"], rows


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()

