"""Run engine - executes one RunConfig stage by stage inside its run directory"""
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import yaml

from app.cluster import (
    cluster_with_retries,
    export_assignments,
    export_pca,
    extract_features,
    load_assignments,
    partition,
)
from app.config import RunConfig, check_budget, dump_run_config
from app.dataset import (
    Corpus,
    ImbalanceSpec,
    LabeledDataset,
    export_distribution,
    load_corpus,
    make_balanced_rescaled,
    make_imbalanced,
    synthesize_corpus,
)
from app.dataset.corpus import TEST_FILES, TRAIN_FILES
from app.distill import build_setup, distill
from app.engine import (
    EXIT_CONFIG,
    EXIT_UNEXPECTED,
    EventLog,
    ResultRow,
    Stage,
    read_results,
    write_results,
)
from app.errors import (
    BudgetMismatchError,
    InvalidConfigError,
    RunLockedError,
    StageError,
)
from app.events import (
    RunCompletedEvent,
    RunStartedEvent,
    StageCompletedEvent,
    StageFailedEvent,
    StageSkippedEvent,
    StageStartedEvent,
)
from app.lineval import linear_eval
from app.models import ModelBundle, init_bundle
from app.models.checkpoint import load_checkpoint, save_checkpoint
from app.trainer import clear_training_state, pretrain, train_experts
from app.utils import derive_seed, settings, setup_logging

logger = logging.getLogger(__name__)


def resolve_output_dir(output_dir: str) -> Path:
    """Relative output directories live under ARTIFACT_ROOT"""
    path = Path(output_dir)
    return path if path.is_absolute() else Path(settings.ARTIFACT_ROOT) / path


@dataclass
class RunPaths:
    root: Path

    @property
    def config_lock(self) -> Path:
        return self.root / "config.lock"

    @property
    def lock_file(self) -> Path:
        return self.root / ".lock"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def cluster(self) -> Path:
        return self.root / "cluster"

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def events(self) -> Path:
        return self.logs / "events.jsonl"

    @property
    def results(self) -> Path:
        return self.root / "results.csv"

    @property
    def distribution(self) -> Path:
        return self.root / "distribution.csv"

    @property
    def subset(self) -> Path:
        return self.root / "subset.csv"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / f"{name}.ckpt"

    def log(self, name: str) -> Path:
        return self.logs / f"{name}.csv"


@dataclass
class RunState:
    """Artifacts handed from one stage to the next"""
    corpus: Optional[Corpus] = None
    subset: Optional[LabeledDataset] = None
    subset_label: str = ""
    base: Optional[ModelBundle] = None
    assignments: Optional[np.ndarray] = None
    partitions: List[LabeledDataset] = field(default_factory=list)
    experts: List[ModelBundle] = field(default_factory=list)
    student: Optional[ModelBundle] = None
    accuracy: Optional[float] = None


def log_rows(path: Path) -> int:
    return len(pd.read_csv(path)) if path.exists() else 0


class PipelineEngine:
    """Runs the stage plan of one config

    Flow:
    dataset → pretrain → [cluster] → [experts] → [distill] → lineval

    Every stage persists its artifacts; a rerun skips stages whose artifacts
    exist, so an interrupted run resumes where it failed.
    """

    def __init__(self, config: RunConfig, device: Optional[str] = None, configure_logging: bool = True):
        check_budget(config)
        self.config = config
        self.device = device
        self.paths = RunPaths(resolve_output_dir(config.output_dir))
        self.configure_logging = configure_logging
        self.state = RunState()
        self.events: Optional[EventLog] = None
        self._handlers: Dict[Stage, Callable[[], Tuple[int, Dict, bool]]] = {
            Stage.DATASET: self._dataset,
            Stage.PRETRAIN: self._pretrain,
            Stage.CLUSTER: self._cluster,
            Stage.EXPERTS: self._experts,
            Stage.DISTILL: self._distill,
            Stage.LINEVAL: self._lineval,
        }

    # ------------------------------------------------------------ plan

    @property
    def no_expert(self) -> bool:
        return self.config.method == "simsiam+d" and not self.config.distill.use_experts

    def plan(self) -> List[Stage]:
        """Ordered stages for the configured method"""
        method = self.config.method
        if method == "simsiam+c+d":
            return [Stage.DATASET, Stage.PRETRAIN, Stage.CLUSTER, Stage.EXPERTS, Stage.DISTILL, Stage.LINEVAL]
        if method == "simsiam+d":
            if self.no_expert:
                return [Stage.DATASET, Stage.PRETRAIN, Stage.DISTILL, Stage.LINEVAL]
            return [Stage.DATASET, Stage.PRETRAIN, Stage.EXPERTS, Stage.DISTILL, Stage.LINEVAL]
        return [Stage.DATASET, Stage.PRETRAIN, Stage.LINEVAL]

    def stage_epochs(self) -> Dict[Stage, int]:
        """Pre-training epochs each stage consumes"""
        cfg = self.config
        if not cfg.is_pipeline:
            return {Stage.PRETRAIN: cfg.baseline_epochs}
        if self.no_expert:
            return {Stage.PRETRAIN: cfg.split.base, Stage.DISTILL: cfg.split.expert + cfg.split.distill}
        return {Stage.PRETRAIN: cfg.split.base, Stage.EXPERTS: cfg.split.expert, Stage.DISTILL: cfg.split.distill}

    # ------------------------------------------------------------ run

    def run(self, stop_after: Optional[Stage] = None) -> List[ResultRow]:
        """Execute the plan (up to `stop_after`) and return the result rows"""
        plan = self.plan()
        if stop_after is not None and stop_after not in plan:
            raise InvalidConfigError(f"stage {stop_after.tag} is not part of the {self.config.method} plan")

        self.paths.root.mkdir(parents=True, exist_ok=True)
        self._acquire_lock()
        try:
            if self.configure_logging:
                setup_logging(settings.LOG_LEVEL, self.paths.logs)
            self._write_config_lock()
            self.events = EventLog(self.paths.events)

            if self.paths.results.exists() and stop_after in (None, Stage.LINEVAL):
                logger.info(f"✅ {self.config.name}: results already present, nothing to do")
                return read_results(self.paths.results)

            started = datetime.now(timezone.utc)
            self.events.put(RunStartedEvent(
                run=self.config.name, method=self.config.method, seed=self.config.seed, budget=self.config.budget,
            ))
            logger.info(f"🚀 Run {self.config.name}: {self.config.method}, seed {self.config.seed}, "
                        f"stages {[s.tag for s in plan]} → {self.paths.root}")

            for stage in plan:
                self._execute(stage)
                if stage == stop_after:
                    return []

            executed = self.events.executed_epochs()
            logged = self.logged_epochs()
            expected = self.config.budget if self.config.is_pipeline else self.config.baseline_epochs
            if executed != expected or logged != expected:
                raise BudgetMismatchError(
                    f"executed {executed} pre-training epochs ({logged} rows in stage logs), expected {expected}"
                )

            row = ResultRow(
                subset=self.state.subset_label,
                n=len(self.state.subset),
                method=self.config.method,
                accuracy=self.state.accuracy,
                seed=self.config.seed,
                run=self.config.name,
                epochs=executed,
                started_at=started,
                finished_at=datetime.now(timezone.utc),
            )
            write_results([row], self.paths.results)
            self.events.put(RunCompletedEvent(run=self.config.name, accuracy=row.accuracy, epochs=executed))
            logger.info(f"✅ {self.config.name}: {row.subset} N={row.n} {row.method} → {row.accuracy:.2f}%")
            return [row]
        finally:
            self._release_lock()

    def _execute(self, stage: Stage) -> None:
        name = self.config.name
        self.events.put(StageStartedEvent(run=name, stage=stage.tag))
        logger.info(f"▶️ [{name}] stage {stage.tag}")
        try:
            epochs, detail, skipped = self._handlers[stage]()
        except Exception as e:
            self.events.put(StageFailedEvent(run=name, stage=stage.tag, error=str(e), exit_code=stage.exit_code))
            logger.error(f"❌ [{name}] stage {stage.tag} failed: {e}")
            raise StageError(stage.tag, stage.exit_code, e) from e

        if skipped:
            self.events.put(StageSkippedEvent(run=name, stage=stage.tag, detail=detail))
            logger.info(f"⏭️ [{name}] stage {stage.tag} skipped, artifacts present")
        else:
            self.events.put(StageCompletedEvent(run=name, stage=stage.tag, epochs=epochs, detail=detail))

    def logged_epochs(self) -> int:
        """Pre-training epochs recorded in the per-stage CSV logs (cross-check for the event count)"""
        total = log_rows(self.paths.log("pretrain"))
        if Stage.EXPERTS in self.plan():
            total += log_rows(self.paths.log("expert_0"))
        if Stage.DISTILL in self.plan():
            total += log_rows(self.paths.log("distill"))
        return total

    # ------------------------------------------------------------ locking

    def _acquire_lock(self) -> None:
        try:
            fd = os.open(self.paths.lock_file, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"{self.paths.root} is locked by another process ({self.paths.lock_file})")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))

    def _release_lock(self) -> None:
        self.paths.lock_file.unlink(missing_ok=True)

    def _write_config_lock(self) -> None:
        resolved = self.config.model_dump(mode="json")
        if self.paths.config_lock.exists():
            locked = yaml.safe_load(self.paths.config_lock.read_text())
            if locked != resolved:
                raise InvalidConfigError(
                    f"{self.paths.root} holds a run with a different config; use a new output_dir"
                )
            return
        dump_run_config(self.config, self.paths.config_lock)

    # ------------------------------------------------------------ stages

    def _corpus_root(self) -> Path:
        cfg = self.config.dataset
        if not cfg.is_synthetic:
            return Path(cfg.source)
        root = self.paths.data
        if not all((root / name).exists() for name in TRAIN_FILES + TEST_FILES):
            synth = cfg.synthetic
            synthesize_corpus(
                root,
                num_classes=cfg.num_classes,
                train_per_class=synth.train_per_class,
                test_per_class=synth.test_per_class,
                image_size=cfg.image_size,
                signal=synth.signal,
                noise=synth.noise,
                seed=synth.seed,
            )
        return root

    def _dataset(self):
        cfg = self.config
        corpus = load_corpus(self._corpus_root(), cfg.dataset.num_classes, cfg.dataset.image_size)
        per_class = len(corpus.train) // cfg.dataset.num_classes
        seed = derive_seed(cfg.seed, "subset")

        if cfg.subset.kind == "imbalanced":
            subset = make_imbalanced(corpus.train, ImbalanceSpec(cfg.subset.p, cfg.dataset.num_classes), seed)
        elif cfg.subset.kind == "balanced":
            subset = make_balanced_rescaled(
                corpus.train, cfg.subset.resolved_total(per_class, cfg.dataset.num_classes), seed
            )
        else:
            subset = corpus.train

        self.state.corpus = corpus
        self.state.subset = subset
        self.state.subset_label = cfg.subset.label(per_class, cfg.dataset.num_classes)
        export_distribution(subset, self.paths.distribution)
        pd.DataFrame({"record_index": subset.indices, "label": subset.labels}).to_csv(self.paths.subset, index=False)
        return 0, {"n": len(subset), "counts": subset.per_class_counts}, False

    def _pretrain(self):
        cfg = self.config
        final = self.paths.checkpoint("base")
        if final.exists():
            self.state.base = load_checkpoint(final)
            return 0, {}, True

        heads = cfg.model.heads.model_copy(update={"use_predictor": cfg.base_method == "simsiam"})
        bundle = init_bundle(
            cfg.model.backbone, heads, derive_seed(cfg.seed, "init"),
            num_classes=cfg.dataset.num_classes, image_size=cfg.dataset.image_size,
        )
        epochs = self.stage_epochs()[Stage.PRETRAIN]
        result = pretrain(
            cfg.base_method,
            self.state.subset,
            bundle,
            cfg.schedule(epochs, "pretrain"),
            cfg.augmentation,
            log_path=self.paths.log("pretrain"),
            checkpoint_path=self.paths.checkpoint("base.partial"),
            checkpoint_every=cfg.pretrain.checkpoint_every,
            device=self.device,
            resume=True,
        )
        result.bundle.metadata["stage"] = "pretrain"
        save_checkpoint(result.bundle, final)
        clear_training_state(self.paths.checkpoint("base.partial"))
        self.state.base = result.bundle
        return epochs, {"final_loss": result.losses[-1], "resumed_from": result.resumed_from}, False

    def _cluster(self):
        cfg = self.config
        assignments_path = self.paths.cluster / "assignments.csv"
        if assignments_path.exists():
            assignments = load_assignments(assignments_path)
            skipped = True
        else:
            features = extract_features(
                self.state.base, self.state.subset, cfg.augmentation.normalization, device=self.device
            )
            model = cluster_with_retries(features, cfg.cluster, derive_seed(cfg.seed, "kmeans"))
            assignments = model.assignments
            export_assignments(assignments_path, self.state.subset.indices, assignments)
            export_pca(self.paths.cluster / "pca.csv", features, assignments, self.state.subset.labels)
            pd.DataFrame({"iteration": range(len(model.history)), "inertia": model.history}).to_csv(
                self.paths.cluster / "inertia.csv", index=False
            )
            skipped = False

        self.state.assignments = assignments
        self.state.partitions = partition(self.state.subset, assignments, cfg.cluster.k)
        return 0, {"sizes": [len(p) for p in self.state.partitions]}, skipped

    def _experts(self):
        cfg = self.config
        if cfg.method == "simsiam+d":
            self.state.partitions = [self.state.subset]
            self.state.assignments = np.zeros(len(self.state.subset), dtype=np.int64)

        epochs = self.stage_epochs()[Stage.EXPERTS]
        expected = [self.paths.checkpoint(f"expert_{k}") for k in range(len(self.state.partitions))]
        skipped = all(p.exists() for p in expected)
        results = train_experts(
            self.state.base,
            self.state.partitions,
            cfg.schedule(epochs, "experts"),
            cfg.augmentation,
            log_dir=self.paths.logs,
            checkpoint_dir=self.paths.checkpoints,
            max_workers=cfg.parallel_experts,
            device=self.device,
            resume=True,
        )
        self.state.experts = [r.bundle for r in results]
        return epochs, {"k": len(results)}, skipped

    def _distill(self):
        cfg = self.config
        final = self.paths.checkpoint("student")
        if final.exists():
            self.state.student = load_checkpoint(final)
            return 0, {}, True

        if self.no_expert:
            self.state.assignments = np.zeros(len(self.state.subset), dtype=np.int64)
        epochs = self.stage_epochs()[Stage.DISTILL]
        setup = build_setup(
            self.state.base,
            self.state.experts,
            self.state.subset,
            self.state.assignments,
            cfg.schedule(epochs, "distill"),
            cfg.augmentation,
            cfg.distill,
        )
        result = distill(setup, log_path=self.paths.log("distill"), device=self.device)
        save_checkpoint(result.student, final)
        self.state.student = result.student
        return epochs, {"final_loss": result.losses[-1], "k": setup.num_experts}, False

    def _lineval(self):
        cfg = self.config
        bundle = self.state.student if cfg.is_pipeline else self.state.base
        corpus = self.state.corpus
        subset = self.state.subset
        # balanced labeled set of the pre-training set's size
        if len(subset) == len(corpus.train):
            train_ds = corpus.train
        else:
            train_ds = make_balanced_rescaled(corpus.train, len(subset), derive_seed(cfg.seed, "lineval-subset"))
        result = linear_eval(
            bundle,
            train_ds,
            corpus.test,
            cfg.lineval,
            cfg.augmentation.normalization,
            log_path=self.paths.log("lineval"),
            device=self.device,
        )
        self.state.accuracy = result.accuracy
        return 0, {"accuracy": result.accuracy}, False


def run(config: RunConfig, device: Optional[str] = None, stop_after: Optional[Stage] = None) -> List[ResultRow]:
    """Execute one config end to end (or up to `stop_after`)"""
    return PipelineEngine(config, device=device).run(stop_after)


def exit_code_for(error: BaseException) -> int:
    """Process exit code for an error raised by a run"""
    if isinstance(error, StageError):
        return error.exit_code
    if isinstance(error, InvalidConfigError):
        return EXIT_CONFIG
    return EXIT_UNEXPECTED
