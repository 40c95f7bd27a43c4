from __future__ import annotations

import copy
import csv
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, TypeVar

from blocksel.baselines import (
    CITATION,
    METHODS,
    PUBLISHED_ACCURACY,
    bi_rank_correlation,
    percent_delta,
)
from blocksel.charts import plot_block_importance, plot_ga_history, plot_training_curves
from blocksel.config import RunConfig, config_hash, dump_config, load_config
from blocksel.data import DatasetSplits, build_splits, write_manifest
from blocksel.errors import (
    BlockselError,
    ConfigurationError,
    NoRunsFoundError,
    RunLockedError,
    StageError,
)
from blocksel.features import save_feature_set
from blocksel.ga import GAResult, GAState, Genotype, run_ga, write_history_csv
from blocksel.model_adapter import (
    BlockedModel,
    apply_genotype,
    build_blocked_model,
    count_trainable_params,
    extract_block_activations,
)
from blocksel.otdd import BlockImportanceReport, block_importance
from blocksel.provenance import hardware_descriptor, load_json, stamp, write_json
from blocksel.telemetry import emit, get_logger
from blocksel.trainer import (
    ExperimentRecord,
    FitnessEvaluator,
    block_accuracy,
    evaluate,
    fine_tune,
)

log = get_logger(__name__)

T = TypeVar("T")

LOCK_NAME = ".blocksel.lock"
CHECKPOINT = Path("checkpoints") / "ga_state.json"
RECORD_NAME = "experiment_record.json"
CONVENTIONAL_NAME = "conventional_record.json"
BLOCK_ACCURACY_COLUMNS = ("block", "BI", "train_BA", "test_BA")
REPORT_METRICS = (
    "selection_runtime",
    "training_time",
    "evaluation_time",
    "accuracy",
    "trainable_params",
)
REPORT_COLUMNS = (
    "run",
    "method",
    "metric",
    "measured",
    *(f"{m}_published" for m in METHODS),
    *(f"delta_vs_{m}_pct" for m in METHODS),
)


def _pid_alive(pid: int) -> bool:
    if os.name != "posix":
        return True

    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True

    return True


class RunLock:
    """
    Exclusive marker file holding the owner's PID; one active run per
    output directory. A lock left by a dead process is reclaimed.
    """

    def __init__(self, output_dir: str | Path) -> None:
        self.path = Path(output_dir) / LOCK_NAME

    def _owner(self) -> int | None:
        try:
            return int(self.path.read_text(encoding="utf-8").strip())
        except (OSError, ValueError):
            return None

    def _acquire(self) -> bool:
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            return False

        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))

        return True

    def __enter__(self) -> RunLock:
        self.path.parent.mkdir(parents=True, exist_ok=True)

        if self._acquire():
            return self

        owner = self._owner()
        # An unreadable PID may be a lock still being written.
        if owner is not None and not _pid_alive(owner):
            log.warning("reclaiming %s left by dead process %d", self.path, owner)
            self.path.unlink(missing_ok=True)
            if self._acquire():
                return self

        raise RunLockedError(
            f"{self.path.parent} is in use by another run (remove {self.path} if stale)"
        )

    def __exit__(self, *exc: Any) -> None:
        self.path.unlink(missing_ok=True)


@dataclass
class RunContext:
    config: RunConfig
    output_dir: Path
    config_hash: str
    seed: int

    @classmethod
    def of(cls, config: RunConfig) -> RunContext:
        return cls(
            config=config,
            output_dir=Path(config.output_dir),
            config_hash=config_hash(config),
            seed=config.ga.seed,
        )

    @property
    def events_path(self) -> Path:
        return self.output_dir / "events.jsonl"

    @property
    def run_id(self) -> str:
        return f"{self.config_hash}-{self.seed}"

    def stamp(self, payload: dict[str, Any]) -> dict[str, Any]:
        return stamp(payload, config_hash=self.config_hash, seed=self.seed)

    def emit(self, event_type: str, payload: dict[str, Any]) -> None:
        emit(event_type, payload, events_path=self.events_path, run_id=self.run_id)


def make_model_factory(config: RunConfig, num_classes: int) -> Callable[[], BlockedModel]:
    """
    Fresh copies of one pre-trained template, so weights never leak
    between calls and pre-trained weights are read once.
    """

    template = build_blocked_model(
        config.model.name,
        num_classes,
        pretrained=config.model.pretrained,
        seed=config.train.seed,
    )

    return lambda: copy.deepcopy(template)


def _start(ctx: RunContext, command: str) -> None:
    dump_config(ctx.config, ctx.output_dir / "config.yml")
    ctx.emit("run.started", {"command": command, "config_hash": ctx.config_hash, "seed": ctx.seed})
    log.info("%s: config %s, seed %d -> %s", command, ctx.config_hash, ctx.seed, ctx.output_dir)


def _guarded(ctx: RunContext, command: str, body: Callable[[], T]) -> T:
    """
    Run a command body so that every failure leaves a run.failed event.
    Errors from outside the package come out as StageError.
    """

    try:
        return body()
    except StageError:
        raise
    except BlockselError as exc:
        ctx.emit("run.failed", {"command": command, "error": str(exc)})
        raise
    except Exception as exc:
        ctx.emit("run.failed", {"command": command, "error": str(exc)})
        raise StageError(None, exc, stage=command) from exc


def _load_checkpoint(ctx: RunContext) -> GAState | None:
    path = ctx.output_dir / CHECKPOINT
    if not path.is_file():
        return None

    data = load_json(path)
    if data.get("config_hash") != ctx.config_hash:
        log.warning("ignoring checkpoint %s written for another configuration", path)
        return None

    state = GAState.from_dict(data["state"])
    log.info("resuming from generation %d", state.population.generation)

    return state


def _train_and_record(
    ctx: RunContext,
    factory: Callable[[], BlockedModel],
    splits: DatasetSplits,
    genotype: Genotype,
    selection_runtime: float,
    metrics_name: str,
) -> ExperimentRecord:
    model = apply_genotype(factory(), genotype)
    result = fine_tune(
        model,
        splits.train,
        splits.val,
        ctx.config.train,
        metrics_path=ctx.output_dir / metrics_name,
        events_path=ctx.events_path,
        desc=f"train {genotype}",
    )
    accuracy, ms_per_batch = evaluate(model, splits.test, ctx.config.train.batch_size)

    record = ExperimentRecord(
        selection_runtime=selection_runtime,
        training_time=result.training_time,
        evaluation_time=ms_per_batch,
        accuracy=accuracy,
        trainable_params=count_trainable_params(model),
        genotype=genotype,
        config_hash=ctx.config_hash,
        seed=ctx.seed,
        dataset_id=ctx.config.dataset.name,
        hardware=hardware_descriptor(),
        epochs=result.epochs_run,
    )
    ctx.emit("evaluation.completed", record.to_dict())

    return record


def cmd_run_ga(config: RunConfig, *, resume: bool = True) -> ExperimentRecord:
    """
    GA selection, final fine-tune of the best genotype and test evaluation.

    A checkpoint is written after every generation; rerunning the same
    configuration continues from the last completed one.
    """

    ctx = RunContext.of(config)

    with RunLock(ctx.output_dir):
        _start(ctx, "run-ga")
        return _guarded(ctx, "run-ga", lambda: _run_ga(ctx, resume))


def _run_ga(ctx: RunContext, resume: bool) -> ExperimentRecord:
    config = ctx.config
    out = ctx.output_dir

    splits = build_splits(config.dataset)
    write_manifest(splits, out / "manifest.json", **ctx.stamp({}))

    factory = make_model_factory(config, splits.num_classes)
    length = factory().num_blocks
    fitness_split = splits.val if config.train.fitness_split == "val" else splits.test
    evaluator = FitnessEvaluator(
        factory,
        splits.train,
        fitness_split,
        config.train,
        config_hash=ctx.config_hash,
    )

    state = _load_checkpoint(ctx) if resume else None
    prior = state.elapsed_s if state is not None else 0.0
    start = time.perf_counter()

    def on_generation(current: GAState) -> None:
        current.elapsed_s = prior + time.perf_counter() - start
        write_json(out / CHECKPOINT, ctx.stamp({"state": current.to_dict()}))
        ctx.emit("ga.generation.completed", current.history[-1].to_dict())

    result: GAResult = run_ga(
        config.ga,
        length,
        evaluator,
        state=state,
        on_generation=on_generation,
    )
    selection_runtime = prior + time.perf_counter() - start

    write_history_csv(result.history, out / "ga_history.csv")
    plot_ga_history(out / "ga_history.csv", out / "ga_history.png")
    write_json(
        out / "best_genotype.json",
        ctx.stamp(
            {
                "genotype": result.best.genotype.to_string(),
                "fitness": result.best.fitness,
                "selected_blocks": list(result.best.genotype.selected_blocks()),
                "generations": len(result.history),
                "evaluations": result.evaluations,
                "selection_runtime": selection_runtime,
            }
        ),
    )
    ctx.emit(
        "ga.completed",
        {
            "best_genotype": result.best.genotype.to_string(),
            "best_fitness": result.best.fitness,
            "selection_runtime": selection_runtime,
        },
    )

    record = _train_and_record(
        ctx,
        factory,
        splits,
        result.best.genotype,
        selection_runtime,
        "train_metrics.csv",
    )
    write_json(out / RECORD_NAME, record.to_dict())
    plot_training_curves(out / "train_metrics.csv", out / "train_curves.png")

    if config.conventional_baseline:
        conventional = _train_and_record(
            ctx,
            factory,
            splits,
            Genotype.ones(length),
            0.0,
            "conventional_metrics.csv",
        )
        write_json(out / CONVENTIONAL_NAME, conventional.to_dict())

    log.info(
        "best %s: accuracy %.4f with %d trainable parameters",
        record.genotype,
        record.accuracy,
        record.trainable_params,
    )

    return record


def _importance_sources(ctx: RunContext) -> tuple[Any, Any, int, str, str]:
    """
    Source split, target split, target window seed and dataset names.
    """

    config = ctx.config
    seed = config.otdd.seed

    if config.otdd.null_target:
        spec = config.source_dataset or config.dataset
        source = build_splits(spec).train
        return source, source, seed + 2, spec.name, spec.name

    if config.source_dataset is None:
        raise ConfigurationError(
            "block importance needs source_dataset unless otdd.null_target is set"
        )

    source = build_splits(config.source_dataset).train
    target = build_splits(config.dataset).train

    return source, target, seed, config.source_dataset.name, config.dataset.name


def _block_importance(ctx: RunContext) -> BlockImportanceReport:
    config = ctx.config
    out = ctx.output_dir
    source, target, target_seed, source_name, target_name = _importance_sources(ctx)

    num_classes = config.dataset.num_classes
    model = make_model_factory(config, num_classes)()
    n = config.otdd.subsample
    seed = config.otdd.seed
    options = {"batch_size": config.train.batch_size}
    report = BlockImportanceReport()

    for spec in model.blocks:
        b = spec.block_id
        try:
            src = extract_block_activations(model, source, b, n, seed, dataset_id=source_name, **options)
            src_prime = extract_block_activations(model, source, b, n, seed + 1, dataset_id=source_name, **options)
            tgt = extract_block_activations(model, target, b, n, target_seed, dataset_id=target_name, **options)

            for tag, fs in (("src", src), ("src_prime", src_prime), ("tgt", tgt)):
                save_feature_set(fs, out / "features" / f"block{b}_{tag}.bsfs")

            result = block_importance(src, src_prime, tgt, config.otdd, block_id=b)
        except Exception as exc:
            ctx.emit("run.failed", {"command": "block-importance", "block": b, "error": str(exc)})
            raise StageError(b, exc) from exc

        report.entries.append(result)
        ctx.emit("block_importance.block.completed", result.to_dict())
        log.info("block %d: BI %.4f", b, result.value)

    report.write_json(out / "block_importance.json", **ctx.stamp({}))
    report.write_csv(out / "block_importance.csv")
    plot_block_importance(out / "block_importance.csv", out / "block_importance.png")

    return report


def cmd_block_importance(config: RunConfig) -> BlockImportanceReport:
    ctx = RunContext.of(config)

    with RunLock(ctx.output_dir):
        _start(ctx, "block-importance")
        return _guarded(ctx, "block-importance", lambda: _block_importance(ctx))


def _read_bi(path: Path) -> dict[int, float]:
    with path.open(encoding="utf-8", newline="") as f:
        return {int(r["block"]): float(r["BI"]) for r in csv.DictReader(f)}


def _block_accuracy(ctx: RunContext) -> list[dict[str, Any]]:
    config = ctx.config
    out = ctx.output_dir

    bi_csv = out / "block_importance.csv"
    bi_json = out / "block_importance.json"
    if bi_csv.is_file() and bi_json.is_file() and load_json(bi_json).get("config_hash") == ctx.config_hash:
        bi = _read_bi(bi_csv)
    else:
        bi = {e.block_id: e.value for e in _block_importance(ctx).entries}

    splits = build_splits(config.dataset)
    factory = make_model_factory(config, splits.num_classes)
    rows: list[dict[str, Any]] = []

    for b in range(1, factory().num_blocks + 1):
        try:
            train_ba, test_ba = block_accuracy(
                b,
                factory,
                splits.train,
                splits.test,
                config.train,
                val=splits.val,
            )
        except Exception as exc:
            ctx.emit("run.failed", {"command": "block-accuracy", "block": b, "error": str(exc)})
            raise StageError(b, exc) from exc

        row = {"block": b, "BI": bi.get(b), "train_BA": train_ba, "test_BA": test_ba}
        rows.append(row)
        ctx.emit("block_accuracy.block.completed", row)
        log.info("block %d: train BA %.4f, test BA %.4f", b, train_ba, test_ba)

    path = out / "block_accuracy.csv"
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(BLOCK_ACCURACY_COLUMNS)
        for row in rows:
            writer.writerow([row["block"], repr(row["BI"]), repr(row["train_BA"]), repr(row["test_BA"])])

    write_json(out / "block_accuracy.json", ctx.stamp({"blocks": rows}))
    plot_block_importance(path, out / "block_accuracy.png")

    return rows


def cmd_block_accuracy(config: RunConfig) -> list[dict[str, Any]]:
    """
    Train and test accuracy per single trainable block, merged with BI.
    """

    ctx = RunContext.of(config)

    with RunLock(ctx.output_dir):
        _start(ctx, "block-accuracy")
        return _guarded(ctx, "block-accuracy", lambda: _block_accuracy(ctx))


def find_runs(output_dir: str | Path) -> list[Path]:
    """
    Run directories (holding a config.yml) at or directly below output_dir.
    """

    root = Path(output_dir)
    if not root.is_dir():
        return []

    candidates = [root, *sorted(p for p in root.iterdir() if p.is_dir())]

    return [p for p in candidates if (p / "config.yml").is_file()]


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)

    return f"{value:.6g}"


def _run_label(root: Path, run: Path) -> str:
    return "." if run == root else run.name


def _report_rows(root: Path, run: Path, missing: list[str]) -> list[dict[str, str]]:
    config = load_config(run / "config.yml")
    published = PUBLISHED_ACCURACY.get(config.baseline or "", {})
    label = _run_label(root, run)
    rows: list[dict[str, str]] = []

    for method, name in (("blockselect", RECORD_NAME), ("conventional", CONVENTIONAL_NAME)):
        path = run / name
        if not path.is_file():
            if method == "blockselect" or config.conventional_baseline:
                missing.append(f"{label}: {name}")
            continue

        record = ExperimentRecord.from_dict(load_json(path))
        for metric in REPORT_METRICS:
            measured = getattr(record, metric)
            row = {"run": label, "method": method, "metric": metric, "measured": _fmt(measured)}
            for m in METHODS:
                value = published.get(m, {}).get(metric)
                row[f"{m}_published"] = _fmt(value)
                row[f"delta_vs_{m}_pct"] = _fmt(percent_delta(measured, value))
            rows.append(row)

    return rows


def _bi_summary(root: Path, run: Path) -> str | None:
    path = run / "block_importance.csv"
    if not path.is_file():
        return None

    config = load_config(run / "config.yml")
    values = list(_read_bi(path).values())
    text = f"{_run_label(root, run)}: BI " + ", ".join(f"{v:.3f}" for v in values)

    if config.baseline is not None and len(values) == 7:
        rho = bi_rank_correlation(values, config.baseline)
        text += f" (Spearman rho vs published: {rho:.3f})"

    return text


def cmd_report(output_dir: str | Path) -> Path:
    """
    Measured metrics next to the published numbers, as report.md and
    report.csv. Output depends only on the run artifacts.
    """

    root = Path(output_dir)
    runs = find_runs(root)
    if not runs:
        raise NoRunsFoundError(f"no runs found in {root}")

    missing: list[str] = []
    rows: list[dict[str, str]] = []
    bi_lines: list[str] = []

    for run in runs:
        rows.extend(_report_rows(root, run, missing))
        line = _bi_summary(root, run)
        if line is not None:
            bi_lines.append(line)

    with (root / "report.csv").open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    lines = ["# blocksel report", ""]
    lines.append("| " + " | ".join(REPORT_COLUMNS) + " |")
    lines.append("|" + "---|" * len(REPORT_COLUMNS))
    for row in rows:
        lines.append("| " + " | ".join(row[c] for c in REPORT_COLUMNS) + " |")

    if bi_lines:
        lines += ["", "## Block importance", ""]
        lines += [f"- {line}" for line in bi_lines]

    lines += ["", f"Published numbers: {CITATION}."]

    if missing:
        lines += ["", "## Missing", ""]
        lines += [f"- {item}" for item in missing]

    path = root / "report.md"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    for item in missing:
        log.warning("missing artifact %s", item)

    return path


def cmd_plot(output_dir: str | Path) -> list[Path]:
    root = Path(output_dir)
    runs = find_runs(root)
    if not runs:
        raise NoRunsFoundError(f"no runs found in {root}")

    charts = (
        ("ga_history.csv", "ga_history.png", plot_ga_history),
        ("train_metrics.csv", "train_curves.png", plot_training_curves),
        ("block_importance.csv", "block_importance.png", plot_block_importance),
        ("block_accuracy.csv", "block_accuracy.png", plot_block_importance),
    )
    written: list[Path] = []

    for run in runs:
        for source, target, plot in charts:
            if (run / source).is_file():
                written.append(plot(run / source, run / target))

    return written
