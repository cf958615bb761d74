"""
Command-line surface of the simulator.

    python main.py generate [--force]
    python main.py prepare  [--corpus DIR] [--quantile-thresholds] [--sparse] [--demand-events both]
    python main.py train    --mode single|federated [--facilities N] [--patience P] [--margin M]
                            [--local-optimizer adam|sgd] [--rounds R]
    python main.py sweep    [--seeds N] [--margins 0,1] [--rounds R]
    python main.py compare  [SINGLE_METRICS FEDERATED_METRICS]

Global flags (accepted by every subcommand): --config PATH, --seed INT,
--out DIR, --force, --threads N, --quiet.

Output directory layout:

    <out>/manifest.json                  one entry per command run
    <out>/corpus/{trajectories,events}.csv
    <out>/samples/<facility_id>/samples.csv, <out>/samples/summary.json
    <out>/checkpoints/<mode>.json
    <out>/history-<mode>.csv, <out>/metrics-<mode>.json
    <out>/sweep.csv, <out>/comparison.json

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

import argparse
import csv
import dataclasses
import json
import os
import platform
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import src.config as config
from src.app.checkpoint import save_checkpoint
from src.app.errors import FedTaxiError, InvalidConfig
from src.app.evaluation import (
    MetricsReport,
    Split,
    compare,
    lookup_baseline,
    metrics_report,
    split,
    summarize_by_facility,
)
from src.app.fed import (
    FedConfig,
    RoundRecord,
    overlap_expand,
    partition_by_facility,
    pooled_data,
    regroup_clients,
    run_federated,
    run_single,
    server_test_set,
    write_history,
)
from src.app.grid import aggregate, quantile_thresholds
from src.app.ingest import (
    FacilityDataset,
    build_facility_datasets,
    label_histogram,
    merge,
    parse_events,
    parse_trajectories,
    read_samples,
    relabel,
    write_events,
    write_samples,
    write_trajectories,
)
from src.app.nn import ModelParams, predict_labels, samples_to_arrays
from src.app.synthetic import generate_corpus
from src.config.experiment import ExperimentConfig, format_patience, load_experiment_config, parse_patience
from src.helper.atomic_io import write_json_atomic
from src.helper.clock import log, time
from src.helper.seeding import derive_seed
from src.runtime.runtime_manager import RuntimeManager

SWEEP_COLUMNS = ("mode", "facilities", "patience", "seed", "accuracy", "balanced_accuracy", "rounds_ran", "margin")
MODES = ("single", "federated")


@dataclasses.dataclass
class TrainOutcome:
    params: ModelParams
    history: List[RoundRecord]
    metrics: MetricsReport
    per_facility: Dict[str, Dict[str, float]]
    init_seed: int

    @property
    def rounds_ran(self) -> int:
        return len(self.history)

    def metrics_document(self) -> dict:
        document = self.metrics.to_dict()
        document["per_facility"] = self.per_facility
        document["rounds_ran"] = self.rounds_ran
        return document


class Experiment:
    """Runs the generate / prepare / train / sweep / compare commands on one output directory.

    Commands communicate only through files under `out_dir`, so each one can
    be re-run on its own. Every command records its entry in manifest.json.
    """

    def __init__(self, cfg: ExperimentConfig, out_dir: Optional[str] = None, force: bool = False, threads: int = 1):
        self.cfg = cfg
        self.out_dir = out_dir or cfg.output_dir
        self.force = force
        self.threads = threads
        if threads < 1:
            raise InvalidConfig("threads", f"must be >= 1, got {threads}")

    # paths

    def path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)

    @property
    def corpus_dir(self) -> str:
        return self.path("corpus")

    @property
    def samples_dir(self) -> str:
        return self.path("samples")

    # commands

    def generate(self) -> List[str]:
        """Write a synthetic corpus (trajectories.csv, events.csv) for the configured seed."""
        started = time()
        self._refuse_overwrite(self.corpus_dir)
        corpus = generate_corpus(self.cfg.synthetic, self.cfg.master_seed, self.cfg.grid)
        files = [os.path.join(self.corpus_dir, "trajectories.csv"), os.path.join(self.corpus_dir, "events.csv")]
        write_trajectories(corpus.fixes, files[0])
        write_events(corpus.events, files[1])
        log(f"Experiment: wrote corpus with {corpus.trips} trips to {self.corpus_dir}")
        self._write_manifest(
            "generate",
            started,
            files,
            {"trips": corpus.trips, "events": len(corpus.events), "fixes": len(corpus.fixes)},
        )
        return files

    def prepare(self, corpus_dir: Optional[str] = None) -> dict:
        """Parse, merge, locate, aggregate and label a corpus into per-facility samples."""
        started = time()
        corpus_dir = corpus_dir or self.corpus_dir
        self._refuse_overwrite(self.samples_dir)
        settings = self.cfg.prepare
        spec = self.cfg.grid

        fixes = parse_trajectories(os.path.join(corpus_dir, "trajectories.csv"))
        events = parse_events(os.path.join(corpus_dir, "events.csv"))
        merged = merge(fixes, events, settings.locate_window_s)
        overall = aggregate(merged.located, spec, settings.demand_events)

        thresholds = self.cfg.thresholds
        datasets = build_facility_datasets(merged.located, spec, thresholds, settings.enumeration, settings.demand_events)
        if settings.quantile_thresholds:
            thresholds = quantile_thresholds(self.training_counts(datasets))
            log(f"Experiment: quantile thresholds {list(thresholds.boundaries)} from training counts")
            datasets = [relabel(dataset, thresholds) for dataset in datasets]

        os.makedirs(self.samples_dir, exist_ok=True)
        files = []
        for dataset in datasets:
            target = os.path.join(self.samples_dir, dataset.facility_id, "samples.csv")
            write_samples(dataset, target)
            files.append(target)

        resolutions: Dict[str, int] = {}
        for item in merged.located:
            resolutions[item.resolution] = resolutions.get(item.resolution, 0) + 1
        all_samples = [s for d in datasets for s in d.samples]
        summary = {
            "trips": sum(1 for e in events if e.kind == "pickup"),
            "events": len(events),
            "located": len(merged.located),
            "omitted": merged.omitted_count,
            "skipped_out_of_grid": overall.skipped,
            "resolutions": resolutions,
            "thresholds": list(thresholds.boundaries),
            "facilities": [d.facility_id for d in datasets],
            "samples": len(all_samples),
            "label_histogram": {
                "overall": label_histogram(all_samples),
                "per_facility": {d.facility_id: label_histogram(d.samples) for d in datasets},
            },
        }
        oracle = lookup_baseline(all_samples)
        if oracle is not None:
            summary["lookup_baseline"] = {
                "cell_hour_balanced_accuracy": oracle[0].balanced_accuracy,
                "majority_balanced_accuracy": oracle[1].balanced_accuracy,
            }
        summary_path = os.path.join(self.samples_dir, "summary.json")
        write_json_atomic(summary_path, summary)
        files.append(summary_path)
        log(
            f"Experiment: prepared {len(all_samples)} samples for {len(datasets)} facilities "
            f"({summary['located']} located, {summary['omitted']} omitted)"
        )
        self._write_manifest("prepare", started, files, {"summary": summary})
        return summary

    def train(
        self,
        mode: str,
        facilities: Optional[int] = None,
        patience: Optional[float] = None,
        margin: Optional[int] = None,
        seed: Optional[int] = None,
    ) -> TrainOutcome:
        """Train the single or federated model and write checkpoint, history and metrics."""
        if mode not in MODES:
            raise InvalidConfig("train.mode", f"expected 'single' or 'federated', got {mode!r}")
        started = time()
        metrics_path = self.path(f"metrics-{mode}.json")
        if os.path.exists(metrics_path) and not self.force:
            raise InvalidConfig("out", f"{metrics_path} exists; pass --force to overwrite")

        datasets = self.load_datasets()
        outcome = self.run_training(datasets, mode, facilities, patience, margin, seed)

        checkpoint_path = self.path("checkpoints", f"{mode}.json")
        history_path = self.path(f"history-{mode}.csv")
        save_checkpoint(checkpoint_path, outcome.params, outcome.init_seed)
        write_history(history_path, outcome.history)
        write_json_atomic(metrics_path, outcome.metrics_document())
        log(
            f"Experiment: {mode} model: accuracy={outcome.metrics.accuracy:.4f}, "
            f"balanced_accuracy={outcome.metrics.balanced_accuracy:.4f} after {outcome.rounds_ran} rounds"
        )
        self._write_manifest(f"train-{mode}", started, [checkpoint_path, history_path, metrics_path])
        return outcome

    def sweep(self, seeds: Optional[int] = None, margins: Optional[Sequence[int]] = None) -> str:
        """Facilities x patience x margin x seed grid; one CSV row per trained model.

        Rows are flushed to sweep.csv.partial as they complete; the file is
        renamed to sweep.csv once the grid finishes.
        """
        started = time()
        settings = self.cfg.sweep
        n_seeds = settings.seeds if seeds is None else seeds
        margin_values = tuple(settings.margins if margins is None else margins)
        if n_seeds < 1:
            raise InvalidConfig("sweep.seeds", f"must be >= 1, got {n_seeds}")
        if any(m < 0 for m in margin_values):
            raise InvalidConfig("sweep.margins", f"need non-negative integers, got {list(margin_values)}")
        target = self.path("sweep.csv")
        if os.path.exists(target) and not self.force:
            raise InvalidConfig("out", f"{target} exists; pass --force to overwrite")

        datasets = self.load_datasets()
        for n in settings.facilities:
            if n > len(datasets):
                raise InvalidConfig("sweep.facilities", f"{n} exceeds the {len(datasets)} prepared facilities")

        partial = target + ".partial"
        rows = 0
        with open(partial, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(SWEEP_COLUMNS)
            handle.flush()
            for index in range(n_seeds):
                run_seed = self.cfg.master_seed + index
                single = self.run_training(datasets, "single", seed=run_seed)
                writer.writerow(self._sweep_row("single", len(datasets), self.cfg.fed.patience, run_seed, single, 0))
                handle.flush()
                rows += 1
                for n in settings.facilities:
                    for patience in settings.patience:
                        for margin in margin_values:
                            outcome = self.run_training(datasets, "federated", n, patience, margin, run_seed)
                            writer.writerow(self._sweep_row("federated", n, patience, run_seed, outcome, margin))
                            handle.flush()
                            rows += 1
        os.replace(partial, target)
        log(f"Experiment: sweep wrote {rows} rows to {target}")
        self._write_manifest("sweep", started, [target])
        return target

    def compare(self, single_path: Optional[str] = None, federated_path: Optional[str] = None) -> str:
        """Print the single-vs-federated table and write comparison.json; returns the table."""
        started = time()
        single = _load_metrics(single_path or self.path("metrics-single.json"))
        federated = _load_metrics(federated_path or self.path("metrics-federated.json"))
        report = compare(single, federated)
        target = self.path("comparison.json")
        write_json_atomic(target, report.to_dict())
        table = report.render_table()
        print(table)
        self._write_manifest("compare", started, [target])
        return table

    # training pipeline

    def load_datasets(self) -> List[FacilityDataset]:
        if not os.path.isdir(self.samples_dir):
            raise FileNotFoundError(f"no prepared samples in {self.samples_dir}; run prepare first")
        datasets = []
        for name in sorted(os.listdir(self.samples_dir)):
            path = os.path.join(self.samples_dir, name, "samples.csv")
            if os.path.isfile(path):
                datasets.append(read_samples(path, self.cfg.grid))
        if not datasets:
            raise FileNotFoundError(f"no facility samples under {self.samples_dir}")
        return datasets

    def training_counts(self, datasets: Sequence[FacilityDataset]) -> List[int]:
        """Counts of the samples that the master-seed split sends to training.

        The split is unstratified since labels depend on the thresholds being
        fitted. Facilities too small to split contribute nothing.
        """
        counts: List[int] = []
        for dataset in datasets:
            if len(dataset.samples) < 3:
                continue
            part = split(
                len(dataset.samples), self.cfg.split.ratios, derive_seed(self.cfg.master_seed, "split", dataset.facility_id)
            )
            counts.extend(dataset.samples[i].count for i in part.train_idx)
        return counts

    def make_splits(self, datasets: Sequence[FacilityDataset], seed: int) -> Dict[str, Split]:
        splits = {}
        for dataset in datasets:
            labels = [int(s.label) for s in dataset.samples] if self.cfg.split.stratify else None
            splits[dataset.facility_id] = split(
                len(dataset.samples), self.cfg.split.ratios, derive_seed(seed, "split", dataset.facility_id), labels
            )
        return splits

    def fed_config(self, patience: Optional[float], margin: Optional[int], seed: int) -> FedConfig:
        model = self.cfg.model
        fed = self.cfg.fed
        return FedConfig(
            n_rounds=fed.n_rounds,
            local_epochs=fed.local_epochs,
            client_fraction=fed.client_fraction,
            patience=fed.patience if patience is None else patience,
            seed=seed,
            overlap_margin=fed.overlap_margin if margin is None else margin,
            local_optimizer=model.local_optimizer,
            learning_rate=model.active_learning_rate,
            beta1=model.beta1,
            beta2=model.beta2,
            epsilon=model.epsilon,
            layer_widths=model.layer_widths,
        )

    def run_training(
        self,
        datasets: Sequence[FacilityDataset],
        mode: str,
        facilities: Optional[int] = None,
        patience: Optional[float] = None,
        margin: Optional[int] = None,
        seed: Optional[int] = None,
    ) -> TrainOutcome:
        run_seed = self.cfg.master_seed if seed is None else seed
        splits = self.make_splits(datasets, run_seed)
        clients = partition_by_facility(datasets, splits)
        test_samples, owners = server_test_set(datasets, splits)
        fed_cfg = self.fed_config(patience, margin, run_seed)
        init_seed = derive_seed(run_seed, "init")

        if mode == "single":
            train, val = pooled_data(clients)
            # one facility: train under its own id so both modes coincide
            client_id = clients[0].facility_id if len(clients) == 1 else config.POOLED_CLIENT_ID
            params, history = run_single(train, val, fed_cfg, client_id, init_seed)
        else:
            n_groups = facilities if facilities is not None else self.cfg.fed.facilities
            if n_groups is not None:
                clients = regroup_clients(clients, n_groups)
            clients = overlap_expand(clients, self.cfg.grid, fed_cfg.overlap_margin)
            executor = RuntimeManager().load_executor(self.threads)
            try:
                params, history = run_federated(clients, fed_cfg, init_seed, executor)
            finally:
                executor.shutdown()

        x_test, y_test = samples_to_arrays(test_samples)
        preds = predict_labels(params, x_test)
        return TrainOutcome(
            params,
            history,
            metrics_report(preds, y_test),
            summarize_by_facility(preds, y_test, owners),
            init_seed,
        )

    # internals

    def _refuse_overwrite(self, directory: str) -> None:
        if os.path.isdir(directory) and os.listdir(directory) and not self.force:
            raise InvalidConfig("out", f"{directory} is not empty; pass --force to overwrite")

    def _sweep_row(
        self, mode: str, facilities: int, patience: float, seed: int, outcome: TrainOutcome, margin: int
    ) -> Tuple:
        return (
            mode,
            facilities,
            format_patience(patience),
            seed,
            repr(outcome.metrics.accuracy),
            repr(outcome.metrics.balanced_accuracy),
            outcome.rounds_ran,
            margin,
        )

    def _write_manifest(self, command: str, started: float, files: Sequence[str], extra: Optional[dict] = None) -> None:
        manifest_path = self.path("manifest.json")
        manifest = {}
        if os.path.isfile(manifest_path):
            with open(manifest_path, encoding="utf-8") as handle:
                try:
                    manifest = json.load(handle)
                except json.JSONDecodeError:
                    manifest = {}
        entry = {
            "config_hash": self.cfg.config_hash(),
            "config": self.cfg.to_dict(),
            "seed": self.cfg.master_seed,
            "versions": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "pandas": pd.__version__,
            },
            "started": started,
            "finished": time(),
            "files": sorted(os.path.relpath(f, self.out_dir) for f in files),
        }
        if extra:
            entry.update(extra)
        manifest[command] = entry
        write_json_atomic(manifest_path, manifest)


def _load_metrics(path: str) -> MetricsReport:
    with open(path, encoding="utf-8") as handle:
        try:
            return MetricsReport.from_dict(json.load(handle))
        except json.JSONDecodeError as e:
            raise InvalidConfig("metrics", f"{path} is not JSON: {e}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON config")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--threads", type=int, default=1, help="client threads per round")
    common.add_argument("--quiet", action="store_true", help="silence log output")

    parser = argparse.ArgumentParser(prog="fedtaxi", description="Federated taxi-demand prediction simulator")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("generate", parents=[common], help="write a synthetic corpus")

    prepare = commands.add_parser("prepare", parents=[common], help="label a corpus into per-facility samples")
    prepare.add_argument("--corpus", help="corpus directory (default <out>/corpus)")
    prepare.add_argument("--quantile-thresholds", action="store_true", help="tertile level boundaries")
    prepare.add_argument("--sparse", action="store_true", help="only (cell, slot) pairs with demand")
    prepare.add_argument("--demand-events", choices=("pickups", "both"), help="events counted as demand")

    train = commands.add_parser("train", parents=[common], help="train the single or federated model")
    train.add_argument("--mode", choices=MODES, required=True)
    train.add_argument("--facilities", type=int, help="regroup facilities into N clients")
    train.add_argument("--patience", help="early-stopping patience (integer or inf)")
    train.add_argument("--margin", type=int, help="overlap margin in cells")
    train.add_argument("--local-optimizer", choices=("adam", "sgd"))
    train.add_argument("--rounds", type=int, help="number of FedAvg rounds")

    sweep = commands.add_parser("sweep", parents=[common], help="facilities x patience experiment grid")
    sweep.add_argument("--seeds", type=int, help="seeds per setting")
    sweep.add_argument("--margins", help="comma-separated overlap margins, e.g. 0,1")
    sweep.add_argument("--rounds", type=int, help="number of FedAvg rounds")

    compare_parser = commands.add_parser("compare", parents=[common], help="single vs federated metrics")
    compare_parser.add_argument("single", nargs="?", help="single-model metrics JSON")
    compare_parser.add_argument("federated", nargs="?", help="federated metrics JSON")
    return parser


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Layer command-line flags over the loaded config; validation runs again."""
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out

    if args.command == "prepare":
        prepare_changes = {}
        if args.quantile_thresholds:
            prepare_changes["quantile_thresholds"] = True
        if args.sparse:
            prepare_changes["enumeration"] = "sparse"
        if args.demand_events:
            prepare_changes["demand_events"] = args.demand_events
        changes["prepare"] = dataclasses.replace(cfg.prepare, **prepare_changes)

    if args.command in ("train", "sweep"):
        fed_changes = {}
        if args.rounds is not None:
            fed_changes["n_rounds"] = args.rounds
        if args.command == "train":
            if args.patience is not None:
                fed_changes["patience"] = parse_patience(_patience_arg(args.patience), "fed.patience")
            if args.margin is not None:
                fed_changes["overlap_margin"] = args.margin
            if args.facilities is not None:
                fed_changes["facilities"] = args.facilities
            if args.local_optimizer:
                changes["model"] = dataclasses.replace(cfg.model, local_optimizer=args.local_optimizer)
        changes["fed"] = dataclasses.replace(cfg.fed, **fed_changes)
    return dataclasses.replace(cfg, **changes)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.quiet:
        config.VERBOSE = False

    try:
        cfg = apply_overrides(load_experiment_config(args.config), args)
        experiment = Experiment(cfg, force=args.force, threads=args.threads)
        if args.command == "generate":
            experiment.generate()
        elif args.command == "prepare":
            experiment.prepare(args.corpus)
        elif args.command == "train":
            experiment.train(args.mode)
        elif args.command == "sweep":
            experiment.sweep(args.seeds, _parse_margins(args.margins))
        elif args.command == "compare":
            experiment.compare(args.single, args.federated)
    except InvalidConfig as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (FedTaxiError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def _patience_arg(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def _parse_margins(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise InvalidConfig("sweep.margins", f"expected comma-separated integers, got {text!r}")
