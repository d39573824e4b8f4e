"""Command-line front end: ingest, screen, correct, evaluate, simulate.

The pipeline runs the steps requested on the command line or config
file, screens the batches pairwise on pooled QC samples before and
after, and triggers the covariance correction only when the screen
still flags a pair after the prepositive steps.  Reports are JSON with
a fixed key set; corrected data round-trips through CSV exactly.

Exit codes: 0 no significant pair remains (or no correction was
requested); 1 input, parse, or contract error; 2 usage error; 3 the
covariance-correction search was infeasible; 4 significant batch
effects remain after the requested correction.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import itertools
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from debatch import __version__
from debatch.bec import (
    RegressorSpec,
    apply_intra,
    fit_intra,
    ratio_a_correct,
)
from debatch.coco import (
    CocoConfig,
    CocoInfeasibleError,
    CocoPlan,
    apply_coco,
    coco_search,
)
from debatch.core import (
    BatchedDataset,
    ContractViolationError,
    DebatchError,
    RngStream,
)
from debatch.hdtest import PairwiseReport, qc_st
from debatch.metrics import metric_table
from debatch.simlab import (
    SCENARIOS,
    empirical_rate,
    format_table,
    standard_scenario,
)

__all__ = [
    "IngestError",
    "PipelineConfig",
    "ingest",
    "load_config_file",
    "main",
    "run_pipeline",
    "write_dataset",
]

_METADATA_COLUMNS = ("sample_id", "batch", "role", "injection_order")
_STEP_NAMES = ("intra", "ratio_a", "coco")
_METHOD_CHOICES = ("auto", "hn", "yu-fisher", "yu-cauchy")
_SIM_METHODS = {
    "cq-mean": "cq_mean",
    "lc-cov": "lc_cov",
    "hn": "hn",
    "yu-fisher": "yu_fisher",
    "yu-cauchy": "yu_cauchy",
    "gpca": "gpca",
}
_SEED_ENV = "DEBATCH_SEED"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_STILL_SIGNIFICANT = 4


class IngestError(DebatchError):
    """A CSV cell or column failed validation, named by coordinates."""


def _pair_of_floats(value) -> tuple:
    if isinstance(value, str):
        parts = value.split(",")
    else:
        parts = list(value)
    if len(parts) != 2:
        raise ContractViolationError(
            f"expected two comma-separated numbers, got {value!r}"
        )
    return (float(parts[0]), float(parts[1]))


# option-name -> coercion, for values arriving as config-file text
_COCO_FIELDS = {
    "n_search": int,
    "alpha_range": _pair_of_floats,
    "lambda_range": _pair_of_floats,
    "gelnet_tol": float,
    "gelnet_max_iter": int,
}
_REGRESSOR_FIELDS = {
    "n_trees": int,
    "max_depth": int,
    "learning_rate": float,
    "subsample": float,
    "n_correlated": int,
    "cv_folds": int,
}


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one pipeline run needs, resolved and typed.

    ``steps`` is the ordered subset of {intra, ratio_a, coco} to execute;
    the covariance step must come last because it only runs when the
    post-prepositive screen still flags a pair.  ``columns`` maps the
    four logical metadata names to the CSV header names that carry them.
    """

    input: str
    steps: tuple = ()
    method: str = "auto"
    alpha_sig: float = 0.05
    seed: int = 0
    columns: Mapping = None
    out_data: Optional[str] = None
    out_report: Optional[str] = None
    out_qmatrix: Optional[str] = None
    coco: Mapping = field(default_factory=dict)
    regressor: Mapping = field(default_factory=dict)

    def __post_init__(self):
        steps = tuple(str(s) for s in self.steps)
        unknown = [s for s in steps if s not in _STEP_NAMES]
        if unknown:
            raise ContractViolationError(
                f"unknown step(s) {unknown}; choose from {list(_STEP_NAMES)}"
            )
        if len(set(steps)) != len(steps):
            raise ContractViolationError(f"duplicate steps in {list(steps)}")
        if "coco" in steps and steps[-1] != "coco":
            raise ContractViolationError(
                "the coco step is conditional on the post-correction screen "
                "and must come last"
            )
        object.__setattr__(self, "steps", steps)
        method = str(self.method).replace("-", "_")
        if method not in ("auto", "hn", "yu_fisher", "yu_cauchy"):
            raise ContractViolationError(
                f"method must be one of {_METHOD_CHOICES}, got {self.method!r}"
            )
        object.__setattr__(self, "method", method)
        if not 0.0 < float(self.alpha_sig) < 1.0:
            raise ContractViolationError("alpha_sig must lie in (0, 1)")
        object.__setattr__(self, "alpha_sig", float(self.alpha_sig))
        object.__setattr__(self, "seed", int(self.seed))
        cols = dict(self.columns or {})
        unknown = sorted(set(cols) - set(_METADATA_COLUMNS))
        if unknown:
            raise ContractViolationError(
                f"unknown metadata column key(s) {unknown}; "
                f"choose from {list(_METADATA_COLUMNS)}"
            )
        resolved = {name: str(cols.get(name, name)) for name in _METADATA_COLUMNS}
        object.__setattr__(self, "columns", resolved)
        for label, table, mapping in (
            ("coco", _COCO_FIELDS, self.coco),
            ("regressor", _REGRESSOR_FIELDS, self.regressor),
        ):
            out = {}
            for key, value in dict(mapping or {}).items():
                if key not in table:
                    raise ContractViolationError(
                        f"unknown {label} option {key!r}; "
                        f"choose from {sorted(table)}"
                    )
                out[key] = table[key](value)
            object.__setattr__(self, label, out)


def _parse_csv(path, config: PipelineConfig):
    """Read and validate one CSV; return (dataset, feature names).

    Every rejected cell is named by its physical line number and column
    header so the offending text can be found without counting rows.
    """
    cols = config.columns
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise IngestError(f"cannot open {path!r}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path!r} is empty: no header row") from None
        dup = {h for h in header if header.count(h) > 1}
        if dup:
            raise IngestError(
                f"duplicate column name(s) in header: {sorted(dup)}"
            )
        missing = [cols[k] for k in _METADATA_COLUMNS if cols[k] not in header]
        if missing:
            raise IngestError(f"missing required column(s) {missing}")
        meta_idx = {k: header.index(cols[k]) for k in _METADATA_COLUMNS}
        feature_names = [h for h in header if h not in set(cols.values())]
        if not feature_names:
            raise IngestError("no feature columns beyond the metadata")
        feat_idx = [header.index(h) for h in feature_names]

        ids, batches, roles, orders, rows = [], [], [], [], []
        seen_ids: dict = {}
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise IngestError(
                    f"line {line}: expected {len(header)} cells, "
                    f"got {len(row)}"
                )
            sid = row[meta_idx["sample_id"]].strip()
            if sid in seen_ids:
                raise IngestError(
                    f"line {line}, column {cols['sample_id']!r}: duplicate "
                    f"sample_id {sid!r} (first seen on line {seen_ids[sid]})"
                )
            seen_ids[sid] = line
            batch = row[meta_idx["batch"]].strip()
            if not batch:
                raise IngestError(
                    f"line {line}, column {cols['batch']!r}: empty batch label"
                )
            role = row[meta_idx["role"]].strip().lower()
            if role not in ("qc", "subject"):
                raise IngestError(
                    f"line {line}, column {cols['role']!r}: role must be QC "
                    f"or subject, got {row[meta_idx['role']]!r}"
                )
            raw_order = row[meta_idx["injection_order"]].strip()
            try:
                order = int(raw_order)
            except ValueError:
                raise IngestError(
                    f"line {line}, column {cols['injection_order']!r}: "
                    f"injection_order must be an integer, got {raw_order!r}"
                ) from None
            if order <= 0:
                raise IngestError(
                    f"line {line}, column {cols['injection_order']!r}: "
                    f"injection_order must be positive, got {order}"
                )
            values = np.empty(len(feat_idx))
            for k, (name, idx) in enumerate(zip(feature_names, feat_idx)):
                cell = row[idx]
                try:
                    v = float(cell)
                except ValueError:
                    raise IngestError(
                        f"line {line}, column {name!r}: non-numeric cell "
                        f"{cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise IngestError(
                        f"line {line}, column {name!r}: non-finite cell "
                        f"{cell!r}"
                    )
                values[k] = v
            ids.append(sid)
            batches.append(batch)
            roles.append(role)
            orders.append(order)
            rows.append(values)
    if not rows:
        raise IngestError(f"{path!r} has a header but no data rows")
    dataset = BatchedDataset(
        values=np.vstack(rows),
        sample_ids=tuple(ids),
        batch=tuple(batches),
        role=tuple(roles),
        injection_order=np.array(orders, dtype=np.int64),
    )
    return dataset, tuple(feature_names)


def ingest(path, config: Optional[PipelineConfig] = None) -> BatchedDataset:
    """Parse one CSV into a dataset, validating every cell.

    The header must carry the four metadata columns (names configurable
    through ``config.columns``); every other column is a numeric feature.
    Row order, including interleaving of batches, is preserved.
    """
    if config is None:
        config = PipelineConfig(input=str(path))
    dataset, _ = _parse_csv(path, config)
    return dataset


def _atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp.debatch.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(
    dataset: BatchedDataset, path, feature_names: Optional[Sequence] = None
) -> None:
    """Render a dataset back to CSV, written atomically.

    Numeric text uses 17 significant digits, enough to reproduce every
    double exactly, so ingest(write(dataset)) equals the dataset.
    """
    p = dataset.p
    if feature_names is None:
        feature_names = [f"v{i + 1}" for i in range(p)]
    feature_names = [str(n) for n in feature_names]
    if len(feature_names) != p:
        raise ContractViolationError(
            f"need {p} feature names, got {len(feature_names)}"
        )
    lines = [",".join(list(_METADATA_COLUMNS) + feature_names)]
    for r in range(dataset.n_total):
        cells = [
            dataset.sample_ids[r],
            dataset.batch[r],
            dataset.role[r],
            str(int(dataset.injection_order[r])),
        ]
        cells += [f"{v:.17g}" for v in dataset.values[r]]
        lines.append(",".join(cells))
    _atomic_write(path, "\n".join(lines) + "\n")


def _screen_json(report: PairwiseReport) -> dict:
    def cell(x):
        return None if not np.isfinite(x) else float(x)

    methods = []
    for a, b in report.pairs():
        methods.append({"batches": [a, b], "method": report.methods[(a, b)]})
    followup = []
    for (a, b), comp in report.followup.items():
        followup.append(
            {
                "batches": [a, b],
                "p_mean": float(comp[0]),
                "p_cov": float(comp[1]),
            }
        )
    return {
        "alpha_sig": report.alpha_sig,
        "batches": list(report.batches),
        "q_matrix": [[cell(x) for x in row] for row in report.q_matrix],
        "p_matrix": [[cell(x) for x in row] for row in report.p_matrix],
        "methods": methods,
        "followup": followup,
        "significant_pairs": [list(pair) for pair in report.significant_pairs()],
    }


def _plan_json(plan: CocoPlan) -> dict:
    return {
        "batches": list(plan.batches),
        "alphas": [float(a) for a in plan.alphas],
        "lambdas": [float(l) for l in plan.lambdas],
        "mean_v": plan.mean_V,
        "min_fold_change": float(plan.V.min()),
        "max_fold_change": float(plan.V.max()),
        "candidates_passing": plan.candidates_passing,
    }


def _dataset_json(dataset: BatchedDataset, path) -> dict:
    return {
        "path": str(path),
        "n_total": dataset.n_total,
        "p": dataset.p,
        "batches": list(dataset.batches),
        "qc_per_batch": {
            b: int(dataset.qc_values(b).shape[0]) for b in dataset.batches
        },
        "subjects_per_batch": {
            b: int(dataset.subject_values(b).shape[0]) for b in dataset.batches
        },
    }


def run_pipeline(config: PipelineConfig):
    """Execute the configured steps and assemble the report.

    Returns (report dict, final dataset, feature names, exit code).  The
    screen runs before any step and after the prepositive steps; the
    covariance correction is attempted only when that second screen
    still flags a pair, and the screen runs once more after it.
    """
    dataset, feature_names = _parse_csv(config.input, config)
    screen_before = qc_st(dataset, config.alpha_sig, config.method)
    metrics_before = metric_table(dataset)
    root = RngStream(config.seed)

    report = {
        "dataset": _dataset_json(dataset, config.input),
        "steps": [],
        "qc_st_before": _screen_json(screen_before),
        "qc_st_after": None,
        "metrics_before": metrics_before.to_report(),
        "metrics_after": None,
        "coco": None,
        "seeds": {"root": config.seed, "substreams": {}},
        "version": __version__,
    }
    if not config.steps:
        return report, dataset, feature_names, EXIT_OK

    current = dataset
    substreams = report["seeds"]["substreams"]
    for step in config.steps:
        if step == "intra":
            spec = RegressorSpec(rng=root.child(1), **config.regressor)
            model = fit_intra(current, spec)
            current = apply_intra(current, model)
            substreams["intra"] = 1
            report["steps"].append(
                {
                    "name": "intra",
                    "substream": 1,
                    "regressor": {
                        "kind": spec.kind,
                        "n_trees": spec.n_trees,
                        "max_depth": spec.max_depth,
                        "learning_rate": spec.learning_rate,
                        "subsample": spec.subsample,
                        "n_correlated": spec.n_correlated,
                        "cv_folds": spec.cv_folds,
                    },
                    "model": model.to_report(),
                }
            )
        elif step == "ratio_a":
            current = ratio_a_correct(current)
            report["steps"].append({"name": "ratio_a"})

    prepositive = [s for s in config.steps if s != "coco"]
    if prepositive:
        screen_mid = qc_st(current, config.alpha_sig, config.method)
    else:
        screen_mid = screen_before

    exit_code = EXIT_OK
    screen_final = screen_mid
    if "coco" in config.steps:
        coco_json = {
            "triggered": False,
            "infeasible": False,
            "screen": _screen_json(screen_mid),
        }
        if screen_mid.significant_pairs():
            coco_json["triggered"] = True
            coco_config = CocoConfig(
                rng=root.child(2),
                alpha_sig=config.alpha_sig,
                **config.coco,
            )
            try:
                plan = coco_search(current, coco_config)
            except CocoInfeasibleError as exc:
                coco_json["infeasible"] = True
                coco_json["remedy"] = (
                    "no sampled correction passed the covariance screen; "
                    "apply a different prepositive correction and retry"
                )
                coco_json["best"] = (
                    _plan_json(exc.best) if exc.best is not None else None
                )
                exit_code = EXIT_INFEASIBLE
            else:
                current = apply_coco(current, plan)
                substreams["coco"] = 2
                coco_json["plan"] = _plan_json(plan)
                report["steps"].append(
                    {
                        "name": "coco",
                        "substream": 2,
                        "config": {
                            "n_search": coco_config.n_search,
                            "alpha_range": list(coco_config.alpha_range),
                            "lambda_range": list(coco_config.lambda_range),
                            "alpha_sig": coco_config.alpha_sig,
                            "gelnet_tol": coco_config.gelnet_tol,
                            "gelnet_max_iter": coco_config.gelnet_max_iter,
                        },
                        "plan": _plan_json(plan),
                    }
                )
                screen_final = qc_st(current, config.alpha_sig, config.method)
        else:
            coco_json["reason"] = (
                "screen shows no significant pair; covariance correction "
                "not necessary"
            )
        report["coco"] = coco_json

    report["qc_st_after"] = _screen_json(screen_final)
    report["metrics_after"] = metric_table(current).to_report()
    if exit_code == EXIT_OK and screen_final.significant_pairs():
        exit_code = EXIT_STILL_SIGNIFICANT
    return report, current, feature_names, exit_code


def _round_floats(obj):
    """Round every float in a JSON tree to 12 significant digits.

    Scheduling-dependent last-bit differences in threaded linear algebra
    must not leak into report bytes; 12 digits is far beyond Monte Carlo
    precision while collapsing that jitter.
    """
    if isinstance(obj, bool):
        return obj
    if isinstance(obj, float):
        return float(f"{obj:.12g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round_floats(v) for v in obj]
    return obj


def _report_text(report: dict) -> str:
    return json.dumps(
        _round_floats(report), indent=2, sort_keys=True, allow_nan=False
    ) + "\n"


def _qmatrix_csv(report: dict) -> str:
    """Long-format q values for heatmap rendering: one row per pair."""
    lines = ["stage,batch_a,batch_b,q"]
    for stage in ("before", "after"):
        screen = report[f"qc_st_{stage}"]
        if screen is None:
            continue
        batches = screen["batches"]
        q = screen["q_matrix"]
        for i, j in itertools.combinations(range(len(batches)), 2):
            lines.append(
                f"{stage},{batches[i]},{batches[j]},{q[i][j]:.12g}"
            )
    return "\n".join(lines) + "\n"


_CONFIG_SCHEMA = {
    "input": {"path", *_METADATA_COLUMNS},
    "pipeline": {"steps", "method", "alpha_sig", "seed"},
    "coco": set(_COCO_FIELDS),
    "regressor": set(_REGRESSOR_FIELDS),
    "output": {"data", "report", "qmatrix"},
}


def load_config_file(path) -> dict:
    """Parse the INI-style config file into {section: {key: text}}.

    Sections and keys are validated against the known option tables so a
    typo fails loudly instead of being ignored.
    """
    known = _CONFIG_SCHEMA
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ContractViolationError(
            f"cannot open config file {path!r}: {exc}"
        ) from exc
    except configparser.Error as exc:
        raise ContractViolationError(
            f"malformed config file {path!r}: {exc}"
        ) from exc
    out: dict = {}
    for section in parser.sections():
        if section not in known:
            raise ContractViolationError(
                f"unknown config section [{section}]; "
                f"choose from {sorted(known)}"
            )
        for key in parser[section]:
            if key not in known[section]:
                raise ContractViolationError(
                    f"unknown key {key!r} in config section [{section}]"
                )
        out[section] = dict(parser[section])
    return out


def _resolve_seed(flag_value, file_value) -> int:
    if flag_value is not None:
        return int(flag_value)
    if file_value is not None:
        return int(file_value)
    env = os.environ.get(_SEED_ENV)
    if env is not None and env != "":
        try:
            return int(env)
        except ValueError:
            raise ContractViolationError(
                f"{_SEED_ENV} must be an integer, got {env!r}"
            ) from None
    return 0


def _build_pipeline_config(args, steps_required: bool) -> PipelineConfig:
    file_cfg = load_config_file(args.config) if args.config else {}
    for text in getattr(args, "set", None) or []:
        target, sep, value = text.partition("=")
        section, dot, key = target.partition(".")
        if not sep or not dot or not section or not key:
            raise ContractViolationError(
                f"--set expects section.key=value, got {text!r}"
            )
        if section not in _CONFIG_SCHEMA:
            raise ContractViolationError(
                f"unknown config section {section!r} in --set {text!r}"
            )
        if key not in _CONFIG_SCHEMA[section]:
            raise ContractViolationError(
                f"unknown key {key!r} in config section [{section}]"
            )
        file_cfg.setdefault(section, {})[key] = value

    inp = file_cfg.get("input", {})
    pipe = file_cfg.get("pipeline", {})
    outp = file_cfg.get("output", {})

    path = args.input or inp.get("path")
    if not path:
        raise ContractViolationError(
            "no input file: pass it as an argument or set [input] path"
        )
    columns = {k: inp[k] for k in _METADATA_COLUMNS if k in inp}

    if args.steps is not None:
        steps = tuple(s.strip() for s in args.steps.split(",") if s.strip())
    elif "steps" in pipe:
        steps = tuple(
            s.strip() for s in pipe["steps"].split(",") if s.strip()
        )
    else:
        steps = ()
    if steps_required and not steps:
        raise ContractViolationError(
            "correct needs at least one step: pass --steps or set "
            "[pipeline] steps"
        )
    if not steps_required:
        steps = ()

    method = args.method if args.method is not None else pipe.get("method", "auto")
    alpha = args.alpha if args.alpha is not None else float(
        pipe.get("alpha_sig", 0.05)
    )
    seed = _resolve_seed(args.seed, pipe.get("seed"))

    return PipelineConfig(
        input=path,
        steps=steps,
        method=method,
        alpha_sig=alpha,
        seed=seed,
        columns=columns,
        out_data=args.out_data or outp.get("data"),
        out_report=args.out_report or outp.get("report"),
        out_qmatrix=args.out_qmatrix or outp.get("qmatrix"),
        coco=file_cfg.get("coco", {}),
        regressor=file_cfg.get("regressor", {}),
    )


def _default_path(input_path, suffix: str) -> str:
    stem, _ = os.path.splitext(input_path)
    return stem + suffix


def _cmd_ingest_check(args) -> int:
    config = _build_pipeline_config(args, steps_required=False)
    dataset, feature_names = _parse_csv(config.input, config)
    print(
        f"ok: {dataset.n_total} rows, {len(feature_names)} features, "
        f"{len(dataset.batches)} batches"
    )
    for b in dataset.batches:
        n_qc = dataset.qc_values(b).shape[0]
        n_sub = dataset.subject_values(b).shape[0]
        print(f"  batch {b}: {n_qc} qc, {n_sub} subject")
    return EXIT_OK


def _cmd_test(args) -> int:
    config = _build_pipeline_config(args, steps_required=False)
    dataset = ingest(config.input, config)
    screen = qc_st(dataset, config.alpha_sig, config.method)
    print(
        f"pairwise screen over pooled qc samples "
        f"(alpha={config.alpha_sig}, method={config.method})"
    )
    significant = set(screen.significant_pairs())
    order = {b: i for i, b in enumerate(screen.batches)}
    for a, b in screen.pairs():
        q = screen.q_matrix[order[a], order[b]]
        line = f"  {a} vs {b}: q={q:.6f} [{screen.methods[(a, b)]}]"
        if (a, b) in significant:
            comp = screen.followup[(a, b)]
            line += (
                f"  SIGNIFICANT (p_mean={comp[0]:.6f}, p_cov={comp[1]:.6f})"
            )
        print(line)
    n = len(significant)
    print(f"{n} significant pair(s)" if n else "no significant pairs")
    return EXIT_OK


def _run_and_emit(args, steps_required: bool) -> int:
    config = _build_pipeline_config(args, steps_required=steps_required)
    report, corrected, feature_names, code = run_pipeline(config)
    if steps_required:
        out_data = config.out_data or _default_path(
            config.input, ".corrected.csv"
        )
        write_dataset(corrected, out_data, feature_names)
        out_report = config.out_report or _default_path(
            config.input, ".report.json"
        )
        _atomic_write(out_report, _report_text(report))
        print(f"data:   {out_data}")
        print(f"report: {out_report}")
    elif config.out_report:
        _atomic_write(config.out_report, _report_text(report))
        print(f"report: {config.out_report}")
    else:
        sys.stdout.write(_report_text(report))
    if config.out_qmatrix:
        _atomic_write(config.out_qmatrix, _qmatrix_csv(report))
        print(f"q-matrix: {config.out_qmatrix}")
    return code


def _cmd_correct(args) -> int:
    return _run_and_emit(args, steps_required=True)


def _cmd_evaluate(args) -> int:
    return _run_and_emit(args, steps_required=False)


def _cmd_simulate(args) -> int:
    method = _SIM_METHODS[args.method]
    reps = 5000 if args.full_reps else args.reps
    seed = _resolve_seed(args.seed, None)
    root = RngStream(seed)
    results = []
    cell = 0
    for n in sorted(set(args.n)):
        for p in sorted(set(args.p)):
            spec = standard_scenario(
                args.scenario, n, n, p, reps, root.child(cell),
                alpha_sig=args.alpha if args.alpha is not None else 0.05,
            )
            results.append(
                empirical_rate(spec, method, gpca_perms=args.gpca_perms)
            )
            cell += 1
    print(format_table(results))
    if args.out:
        lines = ["method,n1,n2,p,rate"]
        for r in results:
            lines.append(
                f"{r.method},{r.n1},{r.n2},{r.p},{r.rejection_rate:.6f}"
            )
        _atomic_write(args.out, "\n".join(lines) + "\n")
        print(f"table: {args.out}")
    return EXIT_OK


def _fmt_pct(x) -> str:
    return f"{x:.2f}%"


def _cmd_report(args) -> int:
    try:
        with open(args.report, "r", encoding="utf-8") as fh:
            report = json.load(fh)
    except OSError as exc:
        raise ContractViolationError(
            f"cannot open report {args.report!r}: {exc}"
        ) from exc
    except json.JSONDecodeError as exc:
        raise ContractViolationError(
            f"{args.report!r} is not valid JSON: {exc}"
        ) from exc
    ds = report["dataset"]
    print(
        f"dataset: {ds['path']} ({ds['n_total']} rows, {ds['p']} features, "
        f"batches: {', '.join(ds['batches'])})"
    )
    steps = [s["name"] for s in report["steps"]]
    print(f"steps run: {', '.join(steps) if steps else 'none'}")
    for stage in ("before", "after"):
        screen = report[f"qc_st_{stage}"]
        if screen is None:
            print(f"screen {stage}: not run")
            continue
        pairs = screen["significant_pairs"]
        if pairs:
            names = ", ".join(f"{a} vs {b}" for a, b in pairs)
            print(f"screen {stage}: {len(pairs)} significant pair(s): {names}")
        else:
            print(f"screen {stage}: no significant pairs")
    for stage in ("before", "after"):
        m = report[f"metrics_{stage}"]
        if m is None:
            continue
        cf = m["cf_rsd_percent"]
        print(
            f"metrics {stage}: median RSD {_fmt_pct(m['median_rsd_percent'])}, "
            f"CF at thresholds {m['rsd_thresholds_percent']}: "
            f"{[_fmt_pct(v) for v in cf]}"
        )
    coco = report["coco"]
    if coco is not None:
        if coco.get("infeasible"):
            print("covariance correction: infeasible; " + coco["remedy"])
        elif coco["triggered"]:
            plan = coco["plan"]
            print(
                f"covariance correction: applied "
                f"(mean fold change {plan['mean_v']:.4f}, "
                f"{plan['candidates_passing']} candidates passed)"
            )
        else:
            print(f"covariance correction: skipped; {coco['reason']}")
    print(f"seed: {report['seeds']['root']}  version: {report['version']}")
    return EXIT_OK


def _add_io_flags(sub, with_input=True):
    if with_input:
        sub.add_argument("input", nargs="?", help="input CSV")
    sub.add_argument("--config", help="INI config file; flags win")
    sub.add_argument(
        "--set", action="append", metavar="SECTION.KEY=VALUE",
        help="override one config entry (repeatable)",
    )
    sub.add_argument("--method", choices=_METHOD_CHOICES, default=None)
    sub.add_argument("--alpha", type=float, default=None,
                     help="significance level (default 0.05)")
    sub.add_argument("--seed", type=int, default=None,
                     help=f"RNG seed (default ${_SEED_ENV} or 0)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="debatch",
        description="Detect and correct batch effects in multi-batch data.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    subs = parser.add_subparsers(dest="command", required=True)

    s = subs.add_parser("ingest-check", help="validate a CSV and summarize")
    _add_io_flags(s)
    s.set_defaults(func=_cmd_ingest_check, steps=None,
                   out_data=None, out_report=None, out_qmatrix=None)

    s = subs.add_parser("test", help="pairwise batch screen on qc samples")
    _add_io_flags(s)
    s.set_defaults(func=_cmd_test, steps=None,
                   out_data=None, out_report=None, out_qmatrix=None)

    s = subs.add_parser("correct", help="run correction steps and report")
    _add_io_flags(s)
    s.add_argument("--steps", default=None,
                   help="comma list from intra, ratio_a, coco")
    s.add_argument("--out-data", default=None, help="corrected data CSV")
    s.add_argument("--out-report", default=None, help="JSON report path")
    s.add_argument("--out-qmatrix", default=None,
                   help="long-format q-value CSV for heatmaps")
    s.set_defaults(func=_cmd_correct)

    s = subs.add_parser("evaluate", help="metrics and screen, no correction")
    _add_io_flags(s)
    s.add_argument("--out-report", default=None,
                   help="JSON report path (default: stdout)")
    s.add_argument("--out-qmatrix", default=None,
                   help="long-format q-value CSV for heatmaps")
    s.set_defaults(func=_cmd_evaluate, steps=None, out_data=None)

    s = subs.add_parser("simulate", help="empirical size/power over a grid")
    s.add_argument("--scenario", choices=SCENARIOS, required=True)
    s.add_argument("--method", choices=sorted(_SIM_METHODS), required=True)
    s.add_argument("--n", type=int, nargs="+", default=[10],
                   help="per-group sample sizes (n1 = n2 = n)")
    s.add_argument("--p", type=int, nargs="+", default=[100],
                   help="variable counts")
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--full-reps", action="store_true",
                   help="use 5000 replicates regardless of --reps")
    s.add_argument("--gpca-perms", type=int, default=1000)
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None, help="CSV of rates")
    s.set_defaults(func=_cmd_simulate)

    s = subs.add_parser("report", help="render a JSON report as text")
    s.add_argument("report", help="report JSON path")
    s.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DebatchError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
