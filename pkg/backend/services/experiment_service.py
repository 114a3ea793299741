"""
Experiment runner behind the CLI.

Each command reads a StyleConfig (plus an optional checkpoint or mel
containers) and writes its artifacts into one output directory:

    train         model.ckpt, dataset.ckpt, train_log.csv
    bridge-train  model.ckpt, bridge_log.csv
    sample        samples.ckpt, sample_NN.pgm
    transfer      transfer.ckpt, transfer_NN.pgm, transfer_errors.csv
    eval          eval.csv
    traverse      traverse_dimNN.pgm, traverse.csv
    ablate        ablate.csv (full, w/o ControlVAE, w/o VQ, w/o Diffusion Bridge)
    compare       compare.csv (vaefs, two_stage, one_stage)

All commands are deterministic given (config, seed, input files).
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from config import StyleConfig
from constants import FACTOR_NAMES, StyleSource, SystemMode
from data.toydata import ToyDataset, dataset_from_tensors, dataset_to_tensors, estimate_factors, make_dataset
from ml.errors import EstimationError, StateError, UsageError
from ml.evalmetrics import (
    exclusivity_score,
    mean_mcd,
    mean_squared_error,
    toy_fd,
)
from ml.numerics import RngStream
from ml.pipeline import (
    LossRecord,
    PipelineTraverser,
    SynthesisResult,
    TrainState,
    build_train_state,
    synthesize,
    train_bridge,
    train_system,
)

from .checkpoint_service import load_checkpoint, load_mels, read_tensors, save_checkpoint, save_mels, write_tensors
from .export_service import export_pgm, export_strip

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "L_rec", "KL", "beta", "L_Q", "L_R", "L_B", "L_All"]
EVAL_COLUMNS = ["source", "n", "fd", "mcd", "mse"]
TRANSFER_COLUMNS = [
    "pair", "reference", "content_source",
    "energy_ref", "pitch_ref", "variation_ref",
    "energy_out", "pitch_out", "variation_out",
    "energy_rel_err", "pitch_err", "variation_err", "within_tolerance",
]
TRAVERSE_COLUMNS = ["dim", "r_energy", "r_pitch", "r_variation", "exclusivity", "dominant", "degenerate"]
ABLATE_COLUMNS = ["config", "fd_sampled", "fd_transfer", "mcd_transfer", "mse_transfer"]
COMPARE_COLUMNS = ["system", "fd", "mcd", "mse"]

# Non-parallel transfer tolerances: relative energy, absolute bands for pitch/variation
ENERGY_TOLERANCE = 0.15
PITCH_TOLERANCE = 1.0
VARIATION_TOLERANCE = 1.0

# RNG stream keys so each command draws from its own sequence
SAMPLE_STREAM = 1
EVAL_STREAM = 2
TRAVERSE_STREAM = 3
TRANSFER_STREAM = 4

DEFAULT_COUNT = 8
TRAVERSAL_POINTS = 9

ABLATIONS = {
    "full": {},
    "w/o ControlVAE": {"use_controlvae": False},
    "w/o VQ": {"use_vq": False},
    "w/o Diffusion Bridge": {"use_bridge": False},
}
COMPARE_SYSTEMS = {
    "VAEFS": SystemMode.VAEFS,
    "VAEFS+2s": SystemMode.TWO_STAGE,
    "VAEFS+1s": SystemMode.ONE_STAGE,
}


@dataclass
class RunOptions:
    out_dir: Path
    checkpoint: Optional[Path] = None
    dataset: Optional[Path] = None
    generated: Optional[Path] = None
    target: Optional[Path] = None
    steps: Optional[int] = None
    count: int = DEFAULT_COUNT


@dataclass
class RunResult:
    command: str
    artifacts: List[Path] = field(default_factory=list)
    rows: List[Dict] = field(default_factory=list)
    status: int = 0


# ==================== Helpers ====================

def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Dict], append: bool = False) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not (append and path.exists())
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        if new_file:
            writer.writeheader()
        writer.writerows(rows)
    return path


def log_row(record: LossRecord) -> Dict:
    return {
        "step": record.step,
        "L_rec": record.l_rec,
        "KL": record.kl,
        "beta": record.beta,
        "L_Q": record.l_q,
        "L_R": record.l_r,
        "L_B": record.l_b,
        "L_All": record.l_all,
    }


class CsvLog:
    """Streams one CSV row per training step."""

    def __init__(self, path: Path, append: bool = False):
        self.path = path
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new_file = not (append and path.exists())
        self._file = open(path, "a" if append else "w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._file, fieldnames=LOG_COLUMNS, lineterminator="\n")
        if new_file:
            self._writer.writeheader()

    def __call__(self, record: LossRecord) -> None:
        self._writer.writerow(log_row(record))

    def close(self) -> None:
        self._file.close()


def _steps(config: StyleConfig, options: RunOptions) -> int:
    return config.steps if options.steps is None else options.steps


def _require_checkpoint(options: RunOptions) -> TrainState:
    if options.checkpoint is None:
        raise StateError("This command needs --checkpoint")
    return load_checkpoint(options.checkpoint)


def _dataset(config: StyleConfig, options: RunOptions) -> ToyDataset:
    if options.dataset is not None:
        return dataset_from_tensors(read_tensors(options.dataset))
    return make_dataset(config.dataset_n, config.seed)


def parallel_transfer(state: TrainState, dataset: ToyDataset, rng: RngStream) -> SynthesisResult:
    """Every test mel resynthesized from itself (same content, own style)."""
    rows = dataset.split("test")
    return synthesize(
        state, dataset.contents[rows], StyleSource.REFERENCE, rng, reference=dataset.mels[rows]
    )


def _metric_row(source: str, generated: np.ndarray, target: np.ndarray) -> Dict:
    return {
        "source": source,
        "n": len(generated),
        "fd": toy_fd(generated, target),
        "mcd": mean_mcd(generated, target),
        "mse": mean_squared_error(generated, target),
    }


def train_and_finalize(config: StyleConfig, dataset: ToyDataset, steps: int) -> TrainState:
    state = build_train_state(config)
    train_system(state, dataset, steps)
    return state


def sampled_style_fd(state: TrainState, dataset: ToyDataset, rng: RngStream) -> float:
    """FD of reference-free generations (bridge, or N(0, I) without one) against the test mels."""
    rows = dataset.split("test")
    source = StyleSource.BRIDGE if state.config.use_bridge else StyleSource.PRIOR
    generated = synthesize(state, dataset.contents[rows], source, rng).refined
    return toy_fd(generated, dataset.mels[rows])


# ==================== Commands ====================

def run_train(config: StyleConfig, options: RunOptions) -> RunResult:
    """
    Train every stage of the configured system and checkpoint the result.

    Args:
        config: Run configuration; a resumed run keeps the checkpoint's model config
        options: out_dir; checkpoint resumes a run, steps overrides config.steps

    Returns:
        RunResult with dataset.ckpt, train_log.csv and model.ckpt
    """
    dataset = _dataset(config, options)
    resume = options.checkpoint is not None
    state = load_checkpoint(options.checkpoint) if resume else build_train_state(config)

    result = RunResult("train")
    result.artifacts.append(write_tensors(options.out_dir / "dataset.ckpt", dataset_to_tensors(dataset)))
    log = CsvLog(options.out_dir / "train_log.csv", append=resume)
    try:
        train_system(state, dataset, _steps(state.config, options), on_step=log)
    finally:
        log.close()
    result.artifacts += [log.path, save_checkpoint(state, options.out_dir / "model.ckpt")]
    return result


def run_bridge_train(config: StyleConfig, options: RunOptions) -> RunResult:
    state = _require_checkpoint(options)
    dataset = _dataset(state.config, options)
    log = CsvLog(options.out_dir / "bridge_log.csv")
    try:
        train_bridge(state, dataset, _steps(config, options), on_step=log)
    finally:
        log.close()
    return RunResult("bridge-train", [log.path, save_checkpoint(state, options.out_dir / "model.ckpt")])


def run_sample(config: StyleConfig, options: RunOptions) -> RunResult:
    state = _require_checkpoint(options)
    dataset = _dataset(state.config, options)
    rng = RngStream(state.config.seed, key=(SAMPLE_STREAM,))
    rows = dataset.split("test")[:options.count]
    source = StyleSource.BRIDGE if state.config.use_bridge else StyleSource.PRIOR
    output = synthesize(state, dataset.contents[rows], source, rng)

    result = RunResult("sample")
    for i, mel in enumerate(output.refined):
        result.artifacts.append(export_pgm(mel, options.out_dir / f"sample_{i:02d}.pgm"))
    result.artifacts.append(save_mels(
        options.out_dir / "samples.ckpt", output.refined,
        coarse=output.coarse, contents=dataset.contents[rows].astype(np.float64),
    ))
    return result


def _transfer_row(pair: int, reference: int, content_source: int, truth: np.ndarray, mel: np.ndarray) -> Dict:
    try:
        measured = estimate_factors(mel).as_array()
    except EstimationError:
        measured = np.full(len(FACTOR_NAMES), np.nan)
    energy_err = abs(measured[0] - truth[0]) / truth[0]
    pitch_err = abs(measured[1] - truth[1])
    variation_err = abs(measured[2] - truth[2])
    within = bool(
        energy_err <= ENERGY_TOLERANCE and pitch_err <= PITCH_TOLERANCE and variation_err <= VARIATION_TOLERANCE
    )
    return {
        "pair": pair, "reference": reference, "content_source": content_source,
        "energy_ref": truth[0], "pitch_ref": truth[1], "variation_ref": truth[2],
        "energy_out": measured[0], "pitch_out": measured[1], "variation_out": measured[2],
        "energy_rel_err": energy_err, "pitch_err": pitch_err, "variation_err": variation_err,
        "within_tolerance": int(within),
    }


def non_parallel_pairs(dataset: ToyDataset, count: int) -> List[tuple]:
    """(reference, content source) test-index pairs whose content ids differ where possible."""
    rows = dataset.split("test")
    contents = dataset.factors[rows, 3]
    pairs = []
    for i in range(min(count, len(rows))):
        j = next(
            (k % len(rows) for k in range(i + 1, i + len(rows)) if contents[k % len(rows)] != contents[i]),
            (i + 1) % len(rows),
        )
        pairs.append((int(rows[i]), int(rows[j])))
    return pairs


def run_transfer(config: StyleConfig, options: RunOptions) -> RunResult:
    state = _require_checkpoint(options)
    dataset = _dataset(state.config, options)
    rng = RngStream(state.config.seed, key=(TRANSFER_STREAM,))
    pairs = non_parallel_pairs(dataset, options.count)
    references = np.array([r for r, _ in pairs])
    content_rows = np.array([c for _, c in pairs])
    output = synthesize(
        state, dataset.contents[content_rows], StyleSource.REFERENCE, rng, reference=dataset.mels[references]
    )

    result = RunResult("transfer")
    result.rows = [
        _transfer_row(i, r, c, dataset.factors[r, :3], mel)
        for i, (r, c, mel) in enumerate(zip(references, content_rows, output.refined))
    ]
    for i, mel in enumerate(output.refined):
        result.artifacts.append(export_pgm(mel, options.out_dir / f"transfer_{i:02d}.pgm"))
    result.artifacts.append(save_mels(
        options.out_dir / "transfer.ckpt", output.refined,
        coarse=output.coarse, references=references.astype(np.float64), content_rows=content_rows.astype(np.float64),
    ))
    result.artifacts.append(write_csv(options.out_dir / "transfer_errors.csv", TRANSFER_COLUMNS, result.rows))
    hit_rate = np.mean([row["within_tolerance"] for row in result.rows]) if result.rows else 0.0
    logger.info(f"Non-parallel transfer: {hit_rate:.1%} of {len(result.rows)} pairs within tolerance")
    return result


def run_eval(config: StyleConfig, options: RunOptions) -> RunResult:
    """
    FD / MCD / MSE of generated mels against targets.

    Args:
        config: Run configuration
        options: Either generated + target mel containers, or a checkpoint
            evaluated by parallel transfer on the test split

    Returns:
        RunResult whose rows are also written to eval.csv

    Raises:
        UsageError: only one of generated / target given
    """
    result = RunResult("eval")
    if options.generated is not None or options.target is not None:
        if options.generated is None or options.target is None:
            raise UsageError("eval needs both --generated and --target (or a --checkpoint)")
        result.rows = [_metric_row("generated", load_mels(options.generated), load_mels(options.target))]
    else:
        state = _require_checkpoint(options)
        dataset = _dataset(state.config, options)
        output = parallel_transfer(state, dataset, RngStream(state.config.seed, key=(EVAL_STREAM,)))
        target = dataset.mels[dataset.split("test")]
        result.rows = [_metric_row("coarse", output.coarse, target), _metric_row("refined", output.refined, target)]
    result.artifacts.append(write_csv(options.out_dir / "eval.csv", EVAL_COLUMNS, result.rows))
    return result


class _RecordingTraverser:
    """Keeps every traversal so the strips can be exported after scoring."""

    def __init__(self, inner: PipelineTraverser):
        self.inner = inner
        self.latent_dim = inner.latent_dim
        self.latent_mean = inner.latent_mean
        self.latent_scale = inner.latent_scale
        self.mels: Dict[int, List[np.ndarray]] = {}

    def traverse(self, dim, values, contents):
        self.mels[dim] = self.inner.traverse(dim, values, contents)
        return self.mels[dim]


def run_traverse(config: StyleConfig, options: RunOptions) -> RunResult:
    state = _require_checkpoint(options)
    dataset = _dataset(state.config, options)
    traverser = _RecordingTraverser(PipelineTraverser(state, seed=TRAVERSE_STREAM))
    report = exclusivity_score(traverser, dataset, n_values=TRAVERSAL_POINTS)

    result = RunResult("traverse")
    for dim, mels in traverser.mels.items():
        result.artifacts.append(export_strip(mels, options.out_dir / f"traverse_dim{dim:02d}.pgm"))
    result.rows = [
        {
            "dim": score.dim,
            "r_energy": score.correlations["energy"],
            "r_pitch": score.correlations["pitch"],
            "r_variation": score.correlations["variation"],
            "exclusivity": score.exclusivity,
            "dominant": score.dominant_factor or "",
            "degenerate": int(score.degenerate),
        }
        for score in report.dims
    ]
    result.artifacts.append(write_csv(options.out_dir / "traverse.csv", TRAVERSE_COLUMNS, result.rows))
    logger.info(f"Best dim per factor: {report.best_dim}")
    return result


def run_ablate(config: StyleConfig, options: RunOptions) -> RunResult:
    """Train the full system and each ablation on one dataset; one metrics row per configuration."""
    dataset = _dataset(config, options)
    steps = _steps(config, options)
    target = dataset.mels[dataset.split("test")]

    result = RunResult("ablate")
    for name, overrides in ABLATIONS.items():
        logger.info(f"Ablation '{name}'")
        state = train_and_finalize(config.model_copy(update=overrides), dataset, steps)
        transfer = parallel_transfer(state, dataset, RngStream(config.seed, key=(EVAL_STREAM,)))
        result.rows.append({
            "config": name,
            "fd_sampled": sampled_style_fd(state, dataset, RngStream(config.seed, key=(SAMPLE_STREAM,))),
            "fd_transfer": toy_fd(transfer.refined, target),
            "mcd_transfer": mean_mcd(transfer.refined, target),
            "mse_transfer": mean_squared_error(transfer.refined, target),
        })
    result.artifacts.append(write_csv(options.out_dir / "ablate.csv", ABLATE_COLUMNS, result.rows))
    return result


def run_compare(config: StyleConfig, options: RunOptions) -> RunResult:
    dataset = _dataset(config, options)
    steps = _steps(config, options)
    target = dataset.mels[dataset.split("test")]

    result = RunResult("compare")
    for name, mode in COMPARE_SYSTEMS.items():
        logger.info(f"System '{name}' (mode={mode})")
        state = train_and_finalize(config.model_copy(update={"mode": mode}), dataset, steps)
        refined = parallel_transfer(state, dataset, RngStream(config.seed, key=(EVAL_STREAM,))).refined
        result.rows.append({
            "system": name,
            "fd": toy_fd(refined, target),
            "mcd": mean_mcd(refined, target),
            "mse": mean_squared_error(refined, target),
        })
    result.artifacts.append(write_csv(options.out_dir / "compare.csv", COMPARE_COLUMNS, result.rows))
    return result


COMMANDS: Dict[str, Callable[[StyleConfig, RunOptions], RunResult]] = {
    "train": run_train,
    "bridge-train": run_bridge_train,
    "sample": run_sample,
    "transfer": run_transfer,
    "eval": run_eval,
    "traverse": run_traverse,
    "ablate": run_ablate,
    "compare": run_compare,
}


def run(command: str, config: StyleConfig, options: RunOptions) -> RunResult:
    """
    Dispatch a CLI command.

    Args:
        command: Key of COMMANDS
        config: Validated run configuration
        options: Paths and overrides; out_dir is created if missing

    Returns:
        RunResult with the command's rows and artifact paths

    Raises:
        UsageError: unknown command
    """
    if command not in COMMANDS:
        raise UsageError(f"Unknown command '{command}'; expected one of {', '.join(COMMANDS)}")
    options.out_dir = Path(options.out_dir)
    options.out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Running '{command}' (mode={config.mode}, seed={config.seed}) into {options.out_dir}")
    result = COMMANDS[command](config, options)
    logger.info(f"'{command}' finished: {len(result.artifacts)} artifacts")
    return result
