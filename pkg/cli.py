import os
import sys
import copy
import logging
import argparse
import numpy as np
import pandas as pd
import matplotlib
matplotlib.use("Agg")
from matplotlib import pyplot as plt
import torch
from pathlib import Path
from constants import CONFIG_FILENAME, METADATA_FILENAME, TRAIN_MODES
from dataset import ImageDataset, load_cifar_split, save_dataset_metadata, synth_dataset
from modules import LabelGenerator, MultiExitNet, build_model_and_generator, resolve_widths
from trainer.meta_trainer import MetaDistillTrainer, evaluate_model
from utils import tensor_core as tc
from utils.config_utils import RunConfig, DataConfig, configure_runtime, load_run_config, save_run_config
from utils.errors import IsolationError, MetaDistillError, NumericError, TrainingAborted
from utils.gradcheck_utils import GRADCHECK_SCOPES, run_gradcheck
from utils.io_utils import has_prefix, load_checkpoint, load_module_state, save_yaml_file
from utils.metric_utils import entropy
from typing import Dict, List, Optional, Sequence, Tuple


LOGGER = logging.getLogger(__name__)

EXIT_OK           = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE        = 2
EXIT_NUMERIC      = 3

ABLATION_MODES    = ("baseline", "dsn", "self_distill", "metadistill")


def load_datasets(config: DataConfig) -> Tuple[ImageDataset, ImageDataset]:
    """Training and test splits; the test split is standardized with the training statistics."""
    if config.source == "synth":
        train_set = synth_dataset(config.seed, config.n_train, config.num_classes, config.image_size, split="train")
        stats     = {"mean": train_set.metadata["mean"], "std": train_set.metadata["std"]}
        test_set  = synth_dataset(
            config.seed + 1, config.n_test, config.num_classes, config.image_size, split="test", stats=stats
        )
        return train_set, test_set
    train_set = load_cifar_split(config.path, config.source, "train")
    stats     = {"mean": train_set.metadata["mean"], "std": train_set.metadata["std"]}
    return train_set, load_cifar_split(config.path, config.source, "test", stats=stats)


def run_dir_of(checkpoint_path: str) -> str:
    parent = Path(checkpoint_path).resolve().parent
    return str(parent.parent if parent.name == "checkpoints" else parent)


def _build_models(config: RunConfig, num_classes: int) -> Tuple[MultiExitNet, LabelGenerator]:
    widths = resolve_widths(config.model.arch, config.model.widths)
    return build_model_and_generator(
        widths, num_classes, in_channels=config.model.in_channels, tau=config.train.tau, seed=config.train.seed
    )


def _load_teacher(config: RunConfig, num_classes: int) -> Optional[MultiExitNet]:
    if config.train.mode != "classic_kd":
        return None
    widths  = config.train.teacher_widths or resolve_widths(config.model.arch, config.model.widths)
    teacher = MultiExitNet(widths, num_classes, in_channels=config.model.in_channels)
    tensors = load_checkpoint(config.train.teacher_checkpoint)
    if not has_prefix(tensors, "model.exit_heads"):
        teacher = teacher.strip_exits()
    load_module_state(teacher, tensors, "model")
    LOGGER.info(f"classic KD teacher restored from {config.train.teacher_checkpoint}")
    return teacher


def train_run(config: RunConfig) -> MetaDistillTrainer:
    """Trains one configuration into config.output_dir; raises TrainingAborted on a numeric failure."""
    configure_runtime(config.num_threads, config.deterministic)
    run_dir = config.output_dir
    os.makedirs(run_dir, exist_ok=True)
    save_run_config(config, os.path.join(run_dir, CONFIG_FILENAME))

    train_set, test_set = load_datasets(config.data)
    save_dataset_metadata(train_set, os.path.join(run_dir, METADATA_FILENAME))
    model, generator    = _build_models(config, train_set.num_classes)
    trainer = MetaDistillTrainer(
        model,
        generator,
        config.train,
        run_dir,
        teacher=_load_teacher(config, train_set.num_classes),
        augment=config.data.augment,
        num_workers=config.num_workers,
        deterministic=config.deterministic,
        verbose=config.verbose,
    )
    LOGGER.info(
        f"training {config.train.mode} on {len(train_set)} samples "
        f"({model.num_params()} model / {generator.num_params()} generator parameters) into {run_dir}"
    )
    try:
        trainer.train(train_set, test_set)
    finally:
        trainer.save_metrics_plots()
    return trainer


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    try:
        train_run(config)
    except TrainingAborted as e:
        LOGGER.error(f"training aborted: {e}; last good checkpoint: {e.checkpoint_path}")
        return EXIT_NUMERIC
    return EXIT_OK


def _load_for_inference(checkpoint: str, config_path: Optional[str]) -> Tuple[RunConfig, Dict[str, np.ndarray]]:
    config_path = config_path or os.path.join(run_dir_of(checkpoint), CONFIG_FILENAME)
    return load_run_config(config_path), load_checkpoint(checkpoint)


def _eval_split(config: RunConfig, split: str) -> ImageDataset:
    train_set, test_set = load_datasets(config.data)
    return train_set if split == "train" else test_set


def cmd_eval(args: argparse.Namespace) -> int:
    config, tensors = _load_for_inference(args.checkpoint, args.config)
    configure_runtime(config.num_threads, config.deterministic)
    dataset = _eval_split(config, args.split)
    model, _ = _build_models(config, dataset.num_classes)

    with_exits = has_prefix(tensors, "model.exit_heads")
    if not with_exits:
        model = model.strip_exits()
    load_module_state(model, tensors, "model")

    accuracies = evaluate_model(model, dataset, config.train.batch_size, with_exits=with_exits, ensemble=args.ensemble)
    report = {
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "num_samples": len(dataset),
        "accuracy": {name: float(acc) for name, acc in accuracies.items()},
    }
    for name, acc in accuracies.items():
        LOGGER.info(f"[{args.split}] {name}: {acc:.4f}")

    output_dir = args.output_dir or run_dir_of(args.checkpoint)
    save_yaml_file(report, os.path.join(output_dir, "eval_report.yaml"), sort_keys=False)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    scopes  = GRADCHECK_SCOPES if args.scope == "all" else (args.scope, )
    results = [r for scope in scopes for r in run_gradcheck(scope, seed=args.seed)]
    table   = pd.DataFrame([vars(r) for r in results])
    print(table.to_string(index=False))

    failed = [r for r in results if not r.passed]
    for r in failed:
        LOGGER.error(f"gradcheck failed: {r.scope}/{r.name} rel. error {r.rel_error:.3e} > {r.tolerance:g}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def dump_soft_targets(
        model: MultiExitNet,
        generator: LabelGenerator,
        dataset: ImageDataset,
        n: int
    ) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Long-format rows (sample_id, stage, class, probability) for the generator targets
    of stages 1 .. K-1 and the softmax of the final output (stage "final"), plus the
    mean entropy of each stage over the dumped samples.
    """
    n       = min(n, len(dataset))
    images  = dataset.images[:n]
    ids     = dataset.source_indices[:n].tolist()
    model.eval()
    generator.eval()
    with torch.no_grad():
        output  = model(images, with_exits=False)
        targets = generator.soft_targets(output.features, stop_grad_into_model=True)
        stages  = [(str(k + 1), t) for k, t in enumerate(targets)]
        stages.append(("final", tc.softmax_tempered(output.final_logits)))

    rows, summary = [], []
    for stage, probs in stages:
        probs = probs.double()
        for i, sample_id in enumerate(ids):
            for c in range(probs.shape[1]):
                rows.append({"sample_id": sample_id, "stage": stage, "class": c, "probability": probs[i, c].item()})
        summary.append({"stage": stage, "mean_entropy": entropy(probs).mean().item()})
    return pd.DataFrame(rows), pd.DataFrame(summary)


def plot_soft_targets(df: pd.DataFrame, path: str, class_names: Optional[Sequence[str]]=None):
    sample_ids = df["sample_id"].unique()
    stages     = list(df["stage"].unique())
    fig, axs   = plt.subplots(len(sample_ids), len(stages), figsize=(3 * len(stages), 2.5 * len(sample_ids)), squeeze=False)
    for i, sample_id in enumerate(sample_ids):
        for j, stage in enumerate(stages):
            cell = df[(df["sample_id"] == sample_id) & (df["stage"] == stage)]
            axs[i, j].bar(cell["class"].to_numpy(), cell["probability"].to_numpy())
            axs[i, j].set_ylim(0, 1)
            axs[i, j].set_title(f"sample {sample_id}, stage {stage}", fontsize=9)
            if class_names is not None:
                axs[i, j].set_xticks(range(len(class_names)))
                axs[i, j].set_xticklabels(class_names, rotation=90, fontsize=6)
    fig.tight_layout()
    fig.savefig(path)
    fig.clear()
    plt.close(fig)


def cmd_dump_targets(args: argparse.Namespace) -> int:
    config, tensors = _load_for_inference(args.checkpoint, args.config)
    if not has_prefix(tensors, "generator"):
        LOGGER.error(f"{args.checkpoint} holds no label generator; dump-targets needs a metadistill checkpoint")
        return EXIT_USAGE
    configure_runtime(config.num_threads, config.deterministic)
    dataset = _eval_split(config, args.split)
    model, generator = _build_models(config, dataset.num_classes)
    load_module_state(model, tensors, "model")
    load_module_state(generator, tensors, "generator")

    df, summary = dump_soft_targets(model, generator, dataset, args.n)
    output_dir  = args.output_dir or run_dir_of(args.checkpoint)
    os.makedirs(output_dir, exist_ok=True)
    df.to_csv(os.path.join(output_dir, "soft_targets.csv"), index=False)
    summary.to_csv(os.path.join(output_dir, "soft_targets_entropy.csv"), index=False)
    for _, row in summary.iterrows():
        LOGGER.info(f"stage {row['stage']}: mean entropy {row['mean_entropy']:.4f}")

    if args.plot:
        shown = df[df["sample_id"].isin(df["sample_id"].unique()[:args.plot_samples])]
        plot_soft_targets(shown, os.path.join(output_dir, "soft_targets.jpg"), dataset.metadata.get("names"))
    return EXIT_OK


def _final_records(trainer: MetaDistillTrainer) -> Dict[str, float]:
    df   = trainer.metrics_frame()
    last = df[(df["split"] == "val") & (df["epoch"] == df["epoch"].max())]
    acc  = dict(zip(last["output"], last["accuracy"]))
    return {"final": acc.get("final", np.nan), "ensemble": acc.get("ensemble", np.nan)}


def cmd_ablation(args: argparse.Namespace) -> int:
    base   = load_run_config(args.config)
    root   = args.output_dir or base.output_dir
    runs   = []
    for mode in args.modes:
        for seed in args.seeds:
            config = copy.deepcopy(base)
            config.train.mode = mode
            config.train.seed = seed
            config.output_dir = os.path.join(root, mode, f"seed_{seed}")
            config.validate()
            try:
                trainer = train_run(config)
            except TrainingAborted as e:
                LOGGER.error(f"{mode} seed {seed} aborted: {e}; last good checkpoint: {e.checkpoint_path}")
                return EXIT_NUMERIC
            runs.append({"mode": mode, "seed": seed, **_final_records(trainer)})

    runs_df = pd.DataFrame(runs)
    summary = runs_df.groupby("mode", sort=False)[["final", "ensemble"]].median().reset_index()
    summary = summary.rename(columns={"final": "median_final", "ensemble": "median_ensemble"})
    summary["ensemble_gain"] = summary["median_ensemble"] - summary["median_final"]
    os.makedirs(root, exist_ok=True)
    runs_df.to_csv(os.path.join(root, "ablation_runs.csv"), index=False)
    summary.to_csv(os.path.join(root, "ablation_summary.csv"), index=False)
    print(summary.to_string(index=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Multi-exit self-boosting training with a meta-learned label generator")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train = subparsers.add_parser("train", help="Train one configuration")
    train.add_argument("--config", type=str, required=True, metavar="", help="YAML run config")
    train.add_argument("--output_dir", type=str, default=None, metavar="", help="Overrides output_dir of the config")
    train.set_defaults(func=cmd_train)

    evaluate = subparsers.add_parser("eval", help="Per-exit, final and ensemble accuracy of a checkpoint")
    evaluate.add_argument("--checkpoint", type=str, required=True, metavar="", help="MDCK1 checkpoint")
    evaluate.add_argument(
        "--config", type=str, default=None, metavar="", help="Run config (default: the snapshot next to the checkpoint)"
    )
    evaluate.add_argument("--split", type=str, default="test", choices=["train", "test"], help="Dataset split")
    evaluate.add_argument("--ensemble", action="store_true", help="Also report the exit ensemble")
    evaluate.add_argument("--output_dir", type=str, default=None, metavar="", help="Where eval_report.yaml goes")
    evaluate.set_defaults(func=cmd_eval)

    gradcheck = subparsers.add_parser("gradcheck", help="Finite-difference gradient checks")
    gradcheck.add_argument("--scope", type=str, default="ops", choices=[*GRADCHECK_SCOPES, "all"], help="Check suite")
    gradcheck.add_argument("--seed", type=int, default=0, metavar="", help="Seed of the random check inputs")
    gradcheck.set_defaults(func=cmd_gradcheck)

    dump = subparsers.add_parser("dump-targets", help="Dump generated soft targets of a metadistill checkpoint")
    dump.add_argument("--checkpoint", type=str, required=True, metavar="", help="MDCK1 checkpoint with a generator")
    dump.add_argument("--config", type=str, default=None, metavar="", help="Run config")
    dump.add_argument("--split", type=str, default="test", choices=["train", "test"], help="Dataset split")
    dump.add_argument("--n", type=int, default=16, metavar="", help="Number of samples")
    dump.add_argument("--output_dir", type=str, default=None, metavar="", help="Output directory")
    dump.add_argument("--plot", action="store_true", help="Render per-stage bar charts")
    dump.add_argument("--plot_samples", type=int, default=4, metavar="", help="Samples shown in the plot")
    dump.set_defaults(func=cmd_dump_targets)

    ablation = subparsers.add_parser("ablation", help="Train several modes over several seeds and summarize")
    ablation.add_argument("--config", type=str, required=True, metavar="", help="Base run config")
    ablation.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], metavar="", help="Training seeds")
    ablation.add_argument(
        "--modes", type=str, nargs="+", default=list(ABLATION_MODES), choices=list(TRAIN_MODES), metavar="",
        help="Training modes"
    )
    ablation.add_argument("--output_dir", type=str, default=None, metavar="", help="Root of the ablation runs")
    ablation.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Optional[List[str]]=None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(filename)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S"
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        LOGGER.error(f"numeric failure: {e}")
        return EXIT_NUMERIC
    except IsolationError as e:
        LOGGER.error(f"phase isolation violated: {e}")
        return EXIT_CHECK_FAILED
    except MetaDistillError as e:
        LOGGER.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE
    except FileNotFoundError as e:
        LOGGER.error(str(e))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
