"""Command-line interface: ``surlonformer simulate | train | evaluate | occlude | predict``.

Every command reads an optional flat ``key=value`` config file (``--config``)
whose values are overridden by command-line flags.  Times at this boundary
are months; they are divided by the 120-month horizon once, here.

Exit codes: 0 success, 2 input error, 3 data insufficiency, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NonFiniteError
from .cox import (BaselineHazardTable, DataInsufficiencyError, DivergenceError, TrainConfig,
                  breslow_baseline, landmark_cohort, predict_risks, train)
from .fpca import DegenerateDataError, FpcaCox
from .interpret import (curve_to_csv, dynamic_survival_curve, maps_to_csv, occlusion_sensitivity,
                        render_curve, render_heatmaps)
from .metrics import MONTHS, EvaluationReport, cross_validate
from .model import InputError, ModelConfig, load_checkpoint, save_checkpoint
from .simgen import (Dataset, ManifestError, SimConfig, generate_cohort, load_dataset,
                     save_dataset)

log = logging.getLogger("surlonformer")

EXIT_OK, EXIT_INPUT, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

METHODS = ("surlonformer", "fpca-cox", "oracle")


@dataclass
class RunConfig:
    """Every tunable of every command, with its default.

    Simulation, model and training keys carry the names of the
    corresponding ``SimConfig`` / ``ModelConfig`` / ``TrainConfig`` fields;
    ``seed`` feeds all three.  ``landmark_months`` replaces the standardized
    ``landmark`` of ``TrainConfig``.
    """

    seed: int = 0
    sim: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    landmark_months: float = 12.0
    folds: int = 4
    runs: int = 1
    scenarios: str = "12:12,12:24,12:48,18:12,18:24,18:48,24:12,24:24,24:48"
    methods: str = ",".join(METHODS)
    pve: float = 0.95
    region_side: int = 8
    fill: float = 0.0
    signed: bool = False
    dt_grid: str = "0,6,12,18,24,30,36,42,48"

    EXTRA_KEYS = ("landmark_months", "folds", "runs", "scenarios", "methods", "pve",
                  "region_side", "fill", "signed", "dt_grid", "seed")

    @classmethod
    def known_keys(cls) -> set[str]:
        sim = {f.name for f in fields(SimConfig)} - {"seed"}
        model = {f.name for f in fields(ModelConfig)} - {"seed"}
        train_ = {f.name for f in fields(TrainConfig)} - {"seed", "landmark"}
        return sim | model | train_ | set(cls.EXTRA_KEYS)

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "RunConfig":
        unknown = set(raw) - cls.known_keys()
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
        sim_keys = {f.name for f in fields(SimConfig)}
        model_keys = {f.name for f in fields(ModelConfig)}
        train_keys = {f.name for f in fields(TrainConfig)}
        rc = cls()
        for key, value in raw.items():
            if key in sim_keys and key != "seed":
                rc.sim[key] = value
            elif key in model_keys and key != "seed":
                rc.model[key] = value
            elif key in train_keys and key != "seed":
                rc.training[key] = value
            else:
                default = getattr(rc, key)
                try:
                    if isinstance(default, bool):
                        if str(value).lower() not in ("true", "false", "1", "0"):
                            raise ValueError(value)
                        value = str(value).lower() in ("true", "1")
                    else:
                        value = type(default)(value)
                except ValueError as exc:
                    raise InputError(f"bad value for {key}: {value!r}") from exc
                setattr(rc, key, value)
        return rc

    def canonical(self) -> str:
        items = {k: str(v) for k, v in self.sim.items()}
        items.update({k: str(v) for k, v in self.model.items()})
        items.update({k: str(v) for k, v in self.training.items()})
        for k in self.EXTRA_KEYS:
            items[k] = str(getattr(self, k))
        return "\n".join(f"{k}={items[k]}" for k in sorted(items)) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    # typed views -----------------------------------------------------------
    def sim_config(self) -> SimConfig:
        try:
            return SimConfig.from_dict({**self.sim, "seed": self.seed})
        except (ValueError, TypeError) as exc:
            raise InputError(f"simulation config: {exc}") from exc

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig.from_dict({**self.model, "seed": self.seed})
        except (ValueError, TypeError) as exc:
            raise InputError(f"model config: {exc}") from exc

    def train_config(self, landmark: float | None = None) -> TrainConfig:
        kinds = {f.name: f.type for f in fields(TrainConfig)}
        out = {}
        try:
            for k, v in self.training.items():
                out[k] = int(v) if kinds[k] in (int, "int") else float(v)
            lm = self.landmark_months / MONTHS if landmark is None else landmark
            return TrainConfig(**out, seed=self.seed, landmark=lm)
        except (ValueError, TypeError) as exc:
            raise InputError(f"training config: {exc}") from exc

    def scenario_list(self) -> list[tuple[float, float]]:
        try:
            pairs = []
            for item in self.scenarios.split(","):
                ts, dt = item.split(":")
                pairs.append((float(ts), float(dt)))
        except ValueError as exc:
            raise InputError(f"scenarios must look like 12:12,18:24 (got {self.scenarios!r})") from exc
        return pairs

    def method_list(self) -> list[str]:
        names = [m.strip() for m in self.methods.split(",") if m.strip()]
        bad = [m for m in names if m not in METHODS]
        if bad or not names:
            raise InputError(f"methods must be drawn from {', '.join(METHODS)}")
        return names

    def grid(self) -> list[float]:
        try:
            return [float(x) for x in self.dt_grid.split(",")]
        except ValueError as exc:
            raise InputError(f"bad dt_grid {self.dt_grid!r}") from exc


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    raw: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InputError(f"{path}:{lineno}: empty key")
        raw[key] = value
    return raw


def build_config(args) -> RunConfig:
    raw = read_config_file(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    # dedicated flags win over both
    for key in ("seed", "cohort", "landmark_months", "folds", "runs", "scenarios", "methods",
                "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = str(value)
    return RunConfig.from_mapping(raw)


def write_provenance(out_dir: Path, command: str, rc: RunConfig, **extra) -> None:
    lines = [f"command={command}", f"version={__version__}", f"seed={rc.seed}",
             f"config_sha256={rc.digest()}"]
    lines += [f"{k}={v}" for k, v in extra.items()]
    (out_dir / "provenance.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / "config.txt").write_text(rc.canonical(), encoding="utf-8")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {out}: {exc}") from exc
    return out


def _sibling(checkpoint: Path, suffix: str) -> Path:
    return checkpoint.with_name(checkpoint.stem + suffix)


def _find_patient(ds: Dataset, patient_id: str) -> int:
    for k, seq in enumerate(ds.sequences):
        if seq.patient_id == patient_id:
            return k
    raise InputError(f"unknown patient {patient_id!r}")


# commands --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    rc = build_config(args)
    cfg = rc.sim_config()
    out = _out_dir(args.out)
    ds = generate_cohort(cfg)
    save_dataset(ds, out)
    write_provenance(out, "simulate", rc)
    n_events = sum(r.event for r in ds.records)
    log.info("wrote %d patients (%d events) to %s", len(ds), n_events, out)
    return EXIT_OK


def cmd_train(args) -> int:
    rc = build_config(args)
    mc, tc = rc.model_config(), rc.train_config()
    ds = load_dataset(args.data)
    ckpt = Path(args.out)
    _out_dir(ckpt.parent if str(ckpt.parent) else ".")

    def progress(row, _params):
        if row["epoch"] % 10 == 0:
            log.info("epoch %d loss %.4f val %s", row["epoch"], row["train_loss"],
                     "-" if row["val_loss"] is None else f"{row['val_loss']:.4f}")

    result = train(ds.sequences, ds.records, mc, tc, on_epoch=progress)
    save_checkpoint(result.params, ckpt)
    result.table.to_csv(_sibling(ckpt, ".breslow.csv"))
    result.trace_to_csv(_sibling(ckpt, ".trace.csv"))
    write_provenance(ckpt.parent, "train", rc, best_epoch=result.best_epoch)
    log.info("best epoch %d; checkpoint %s", result.best_epoch, ckpt)
    return EXIT_OK


class _DeepFit:
    def __init__(self, params, table, chunk):
        self.params, self.table, self.chunk = params, table, chunk

    def risks(self, sequences, counts):
        return predict_risks(self.params, sequences, counts, self.params.config, self.chunk)


class _FpcaFit:
    def __init__(self, model: FpcaCox):
        self.model, self.table = model, model.table

    def risks(self, sequences, counts):
        return self.model.predict(sequences, counts)


class _OracleFit:
    """Scores patients with their simulated risk; Breslow table from the training fold."""

    def __init__(self, lookup: dict[str, float], train_ds: Dataset, t_star: float):
        self.lookup = lookup
        seqs, recs, _ = landmark_cohort(train_ds.sequences, train_ds.records, t_star)
        self.table = breslow_baseline(self.risks(seqs, None), recs)

    def risks(self, sequences, counts):
        return np.array([self.lookup[s.patient_id] for s in sequences])


def make_trainers(rc: RunConfig, ds: Dataset, methods, checkpoint=None) -> dict:
    trainers = {}
    mc = rc.model_config()
    for name in methods:
        if name == "surlonformer":
            if checkpoint is not None:
                params = load_checkpoint(checkpoint)
                fixed = _DeepFit(params, BaselineHazardTable.from_csv(
                    _sibling(Path(checkpoint), ".breslow.csv")), rc.train_config().chunk)
                trainers[name] = lambda train_ds, t_star, f=fixed: f
            else:
                def fit_deep(train_ds, t_star):
                    res = train(train_ds.sequences, train_ds.records, mc, rc.train_config(t_star))
                    return _DeepFit(res.params, res.table, rc.train_config().chunk)
                trainers[name] = fit_deep
        elif name == "fpca-cox":
            trainers[name] = lambda train_ds, t_star: _FpcaFit(
                FpcaCox(rc.pve).fit(train_ds.sequences, train_ds.records, t_star))
        elif name == "oracle":
            if ds.true_risks is None:
                raise InputError("oracle method needs a simulated dataset with true risks")
            lookup = {s.patient_id: float(r) for s, r in zip(ds.sequences, ds.true_risks)}
            trainers[name] = lambda train_ds, t_star: _OracleFit(lookup, train_ds, t_star)
    return trainers


def cmd_evaluate(args) -> int:
    rc = build_config(args)
    out = _out_dir(args.out)
    methods = rc.method_list()
    scenarios = rc.scenario_list()
    report = EvaluationReport()
    if args.data:
        datasets = [load_dataset(args.data)]
    else:
        base = rc.sim_config()
        datasets = [generate_cohort(SimConfig(**{**base.to_dict(), "seed": rc.seed + k}))
                    for k in range(rc.runs)]
    for run, ds in enumerate(datasets):
        trainers = make_trainers(rc, ds, methods, args.checkpoint)
        cross_validate(ds, rc.folds, scenarios, trainers, seed=rc.seed + run, report=report,
                       run=run if len(datasets) > 1 else None,
                       on_fold=lambda row: log.info(
                           "t*=%g dt=%g %s fold %d auc %s", row["t_star_months"],
                           row["dt_months"], row["method"], row["fold"], row["auc"]))
    report.to_csv(out / "folds.csv")
    report.summary_to_csv(out / "summary.csv")
    write_provenance(out, "evaluate", rc)
    for row in report.summary():
        log.info("%s t*=%g dt=%g auc %.4f cindex %.4f", row["method"], row["t_star_months"],
                 row["dt_months"], row["auc"], row["cindex"])
    return EXIT_OK


def _landmarked_patient(args, rc: RunConfig):
    ds = load_dataset(args.data)
    k = _find_patient(ds, args.patient)
    seq, rec = ds.sequences[k], ds.records[k]
    t_star = rc.landmark_months / MONTHS
    if rec.time < t_star:
        raise InputError(f"patient {args.patient} is not event-free at month {rc.landmark_months:g}")
    n = seq.visits_until(t_star)
    if n < 1:
        raise InputError(f"patient {args.patient} has no visit by month {rc.landmark_months:g}")
    return seq, n


def cmd_occlude(args) -> int:
    rc = build_config(args)
    params = load_checkpoint(args.checkpoint)
    seq, n = _landmarked_patient(args, rc)
    out = _out_dir(args.out)
    maps, n_passes = occlusion_sensitivity(params, seq, n, rc.region_side, rc.fill, rc.signed)
    maps_to_csv(maps, out / "occlusion.csv")
    for m, svg in zip(maps, render_heatmaps(maps, seq.images)):
        (out / f"visit_{m.visit:02d}.svg").write_text(svg, encoding="utf-8")
    write_provenance(out, "occlude", rc, patient=args.patient, region_side=rc.region_side,
                     fill=rc.fill, forward_passes=n_passes)
    return EXIT_OK


def cmd_predict(args) -> int:
    rc = build_config(args)
    params = load_checkpoint(args.checkpoint)
    table_path = Path(args.breslow) if args.breslow else _sibling(Path(args.checkpoint),
                                                                  ".breslow.csv")
    try:
        table = BaselineHazardTable.from_csv(table_path)
    except OSError as exc:
        raise InputError(f"cannot read Breslow table {table_path}: {exc}") from exc
    seq, n = _landmarked_patient(args, rc)
    risk = 0.0 if args.zero_risk else float(predict_risks(params, [seq], [n], params.config)[0])
    curve = dynamic_survival_curve(risk, table, rc.landmark_months, rc.grid())
    out = _out_dir(args.out)
    curve_to_csv(curve, out / "curve.csv")
    (out / "curve.svg").write_text(render_curve(curve, rc.landmark_months), encoding="utf-8")
    write_provenance(out, "predict", rc, patient=args.patient, risk=repr(risk))
    log.info("patient %s risk %.6f", args.patient, risk)
    return EXIT_OK


# parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory (train: checkpoint path)")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    parser = argparse.ArgumentParser(prog="surlonformer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--cohort", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="fit the deep survival model")
    p.add_argument("--data", required=True)
    p.add_argument("--landmark-months", dest="landmark_months", type=float)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="cross-validated landmark evaluation")
    p.add_argument("--data", help="dataset directory (default: simulate --runs cohorts)")
    p.add_argument("--checkpoint", help="score a fixed trained model instead of refitting")
    p.add_argument("--folds", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--cohort", type=int)
    p.add_argument("--scenarios", help="comma list of tstar:dt pairs in months")
    p.add_argument("--methods", help=f"comma list from {', '.join(METHODS)}")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("occlude", cmd_occlude, "occlusion sensitivity maps"),
                                 ("predict", cmd_predict, "dynamic survival curve")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--patient", required=True)
        p.add_argument("--landmark-months", dest="landmark_months", type=float)
        if name == "predict":
            p.add_argument("--breslow", help="Breslow CSV (default: next to the checkpoint)")
            p.add_argument("--zero-risk", action="store_true",
                           help="force the risk score to 0 (baseline patient)")
        p.set_defaults(func=func)
    return parser


def _configure_logging(quiet: bool) -> None:
    """Send package logs to stderr (one handler, however often ``main`` runs)."""
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    if not any(getattr(h, "_surlonformer", False) for h in log.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        handler._surlonformer = True
        log.addHandler(handler)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors already
        return int(exc.code or 0)
    _configure_logging(args.quiet)
    try:
        return args.func(args)
    except ManifestError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (InputError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (DataInsufficiencyError, DegenerateDataError) as exc:
        log.error("insufficient data: %s", exc)
        return EXIT_DATA
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
