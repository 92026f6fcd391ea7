import os
import time
import tqdm
import logging
import itertools
import torch
from collections import defaultdict
from modules.backbone import MultiExitNet, MultiExitOutput, ensemble_output
from modules.label_generator import LabelGenerator
from modules.lossfns.distill_loss import SelfBoostLoss, classic_kd_loss, cross_entropy
from dataset.image_dataset import ImageDataset
from dataset.sampling import batch_iterator, split_dataset_half
from dataset._container import Batch
from utils import tensor_core as tc
from utils.errors import IsolationError, NumericError, TrainingAborted
from utils.config_utils import TrainConfig
from utils.io_utils import module_state, save_checkpoint
from utils.metric_utils import count_correct, entropy, optimizer_checksum, params_checksum
from .base import BaseTrainer, MetricsRecord
from .meta_step import meta_gradient
from typing import Dict, List, Optional


LOGGER = logging.getLogger(__name__)


class _Tally:
    def __init__(self):
        self.correct = defaultdict(int)
        self.loss    = defaultdict(float)
        self.entropy = defaultdict(float)
        self.count   = 0

    def add(self, name: str, probs_or_logits: torch.Tensor, labels: torch.Tensor,
            loss: Optional[torch.Tensor]=None, target_probs: Optional[torch.Tensor]=None):
        n = labels.shape[0]
        self.correct[name] += count_correct(probs_or_logits, labels)
        if loss is not None:
            self.loss[name] += loss.item() * n
        if target_probs is not None:
            self.entropy[name] += float(entropy(target_probs).sum())

    def records(self, epoch: int, split: str, names: List[str], lr: float, wall_ms: float) -> List[MetricsRecord]:
        out = []
        for name in names:
            out.append(MetricsRecord(
                epoch=epoch,
                split=split,
                output=name,
                accuracy=self.correct[name] / self.count,
                loss=self.loss[name] / self.count if name in self.loss else None,
                mean_target_entropy=self.entropy[name] / self.count if name in self.entropy else None,
                lr=lr,
                wall_ms=wall_ms,
            ))
        return out


class MetaDistillTrainer(BaseTrainer):
    """
    Alternates model updates on the self-boosting objective with (every
    generator_period epochs, metadistill mode only) a generator phase that steps the
    label generator along meta-gradients computed on a fresh random half split.
    """
    def __init__(
        self,
        model: MultiExitNet,
        generator: LabelGenerator,
        config: TrainConfig,
        run_dir: str,
        teacher: Optional[MultiExitNet]=None,
        augment: bool=False,
        num_workers: int=0,
        deterministic: bool=True,
        verbose: bool=False
    ):
        super(MetaDistillTrainer, self).__init__(run_dir)

        self.model         = model
        self.generator     = generator
        self.config        = config
        self.teacher       = teacher
        self.augment       = augment
        self.num_workers   = num_workers
        self.deterministic = deterministic
        self.verbose       = verbose

        self.criterion     = SelfBoostLoss(
            alpha=config.alpha,
            tau=config.tau,
            mode="baseline" if config.mode == "classic_kd" else config.mode
        )
        self.optimizer_s   = torch.optim.SGD(
            self.model.parameters(),
            lr=config.lr_s,
            momentum=config.momentum,
            weight_decay=config.weight_decay
        )
        self.optimizer_g   = torch.optim.Adam(self.generator.parameters(), lr=config.lr_g)
        self.lr_scheduler_s = torch.optim.lr_scheduler.MultiStepLR(
            self.optimizer_s, milestones=config.milestones, gamma=config.lr_factor
        )
        self.lr_scheduler_g = torch.optim.lr_scheduler.MultiStepLR(
            self.optimizer_g, milestones=config.milestones, gamma=config.lr_factor
        )

        if self.teacher is not None:
            self.teacher.set_inference_mode()
            for p in self.teacher.parameters():
                p.requires_grad_(False)

        self.last_epoch          = 0
        self.meta_steps_taken    = 0
        self.isolation_log: List[Dict[str, str]] = []
        self.last_checkpoint: Optional[str] = None

    @property
    def uses_exits(self) -> bool:
        return self.config.mode not in ("baseline", "classic_kd")

    @property
    def uses_generator(self) -> bool:
        return self.config.mode == "metadistill"

    @property
    def lr_s(self) -> float:
        return self.optimizer_s.param_groups[0]["lr"]

    @property
    def zeta(self) -> float:
        return self.config.zeta if self.config.zeta is not None else self.lr_s

    def output_names(self) -> List[str]:
        if not self.uses_exits:
            return ["final"]
        return [f"exit_{k + 1}" for k in range(self.model.num_stages - 1)] + ["final", "ensemble"]

    def is_generator_epoch(self, epoch: int) -> bool:
        return self.uses_generator and epoch % self.config.generator_period == 0

    def checkpoint_tensors(self) -> Dict[str, torch.Tensor]:
        tensors = module_state(self.model, "model")
        if not self.uses_exits:
            # exit heads are never trained in single-output modes
            tensors = {k: v for k, v in tensors.items() if not k.startswith("model.exit_heads.")}
        if self.uses_generator:
            tensors.update(module_state(self.generator, "generator"))
        return tensors

    def save_checkpoint(self, name: str) -> str:
        path = os.path.join(self.checkpoints_dir, name)
        save_checkpoint(self.checkpoint_tensors(), path)
        self.last_checkpoint = path
        return path

    def _record_isolation(self, epoch: int, phase: str, label: str, before: str, after: str):
        self.isolation_log.append({"epoch": epoch, "phase": phase, "state": label, "before": before, "after": after})
        LOGGER.debug(f"epoch {epoch} {phase} phase: {label} checksum {before[:12]} -> {after[:12]}")
        if before != after:
            raise IsolationError(f"{phase} phase of epoch {epoch} modified {label}")

    def _forward(self, images: torch.Tensor) -> MultiExitOutput:
        return self.model(images, with_exits=self.uses_exits)

    def _soft_targets(self, output: MultiExitOutput) -> Optional[List[torch.Tensor]]:
        if self.uses_generator:
            return self.generator.soft_targets(output.features, stop_grad_into_model=True)
        if self.config.mode == "self_distill":
            final_probs = tc.softmax_tempered(output.final_logits.detach(), self.config.tau)
            return [final_probs] * (self.model.num_stages - 1)
        return None

    def _objective(self, output: MultiExitOutput, batch: Batch, targets: Optional[List[torch.Tensor]]) -> torch.Tensor:
        if self.config.mode == "classic_kd":
            with torch.no_grad():
                teacher_logits = self.teacher(batch.images, with_exits=False).final_logits
            return classic_kd_loss(output.final_logits, teacher_logits, batch.labels, self.config.alpha, self.config.tau)
        return self.criterion(output.all_logits, batch.labels, targets)

    def _tally_outputs(
            self,
            tally: _Tally,
            output: MultiExitOutput,
            labels: torch.Tensor,
            targets: Optional[List[torch.Tensor]]
        ):
        with torch.no_grad():
            tally.count += labels.shape[0]
            for k, logits in enumerate(output.exit_logits):
                tally.add(
                    f"exit_{k + 1}", logits, labels,
                    loss=cross_entropy(logits, labels),
                    target_probs=None if targets is None else targets[k]
                )
            final_probs = tc.softmax_tempered(output.final_logits)
            tally.add("final", output.final_logits, labels, loss=cross_entropy(output.final_logits, labels),
                      target_probs=final_probs)
            if output.exit_logits:
                ens = ensemble_output(output.all_logits)
                tally.add("ensemble", ens, labels, target_probs=ens)

    def train_model_phase(self, epoch: int, train_set: ImageDataset) -> _Tally:
        self.model.train()
        self.generator.eval()
        tally = _Tally()
        if self.config.check_isolation:
            g_before = params_checksum(self.generator)
            a_before = optimizer_checksum(self.optimizer_g)

        loader = batch_iterator(
            train_set, self.config.batch_size, self.config.seed, epoch,
            augment=self.augment, num_workers=self.num_workers
        )
        objective_sum = 0.0
        pbar = tqdm.tqdm(loader, total=len(loader.batch_sampler), disable=not self.verbose, desc=f"epoch {epoch}")
        for batch in pbar:
            output  = self._forward(batch.images)
            targets = self._soft_targets(output)
            loss    = self._objective(output, batch, targets)
            if not bool(torch.isfinite(loss)):
                raise NumericError(f"non-finite training loss at epoch {epoch}")

            self.optimizer_s.zero_grad()
            loss.backward()
            self.optimizer_s.step()

            objective_sum += loss.item() * len(batch)
            self._tally_outputs(tally, output, batch.labels, targets)
            pbar.set_postfix(loss=f"{loss.item():.4f}")

        LOGGER.info(f"epoch {epoch}: mean objective {objective_sum / len(train_set):.5f} (lr {self.lr_s:.4g})")
        if self.config.check_isolation:
            self._record_isolation(epoch, "model", "generator parameters", g_before, params_checksum(self.generator))
            self._record_isolation(epoch, "model", "generator optimizer", a_before, optimizer_checksum(self.optimizer_g))
        return tally

    def train_generator_phase(self, epoch: int, train_set: ImageDataset) -> int:
        if self.config.check_isolation:
            s_before = params_checksum(self.model)
            m_before = optimizer_checksum(self.optimizer_s)

        d_train, d_test = split_dataset_half(train_set, seed=[self.config.seed, epoch])
        batch_size = self.config.meta_batch_size or self.config.batch_size
        num_pairs  = self.config.meta_steps or max(1, len(train_set) // (2 * batch_size))
        train_iter = batch_iterator(d_train, batch_size, self.config.seed, epoch, stream=1)
        test_iter  = batch_iterator(d_test, batch_size, self.config.seed, epoch, stream=2)

        self.model.train()
        self.generator.train()
        steps = 0
        for train_batch, test_batch in itertools.islice(zip(train_iter, test_iter), num_pairs):
            grads = meta_gradient(
                self.model, self.generator, self.criterion,
                train_batch, test_batch,
                zeta=self.zeta, order=self.config.meta_order
            )
            self.optimizer_g.zero_grad()
            for name, p in self.generator.named_parameters():
                p.grad = grads[name].detach()
            self.optimizer_g.step()
            steps += 1

        self.meta_steps_taken += steps
        LOGGER.info(f"epoch {epoch}: {steps} generator meta step(s), zeta {self.zeta:.4g}")
        if self.config.check_isolation:
            self._record_isolation(epoch, "generator", "model parameters", s_before, params_checksum(self.model))
            self._record_isolation(epoch, "generator", "model optimizer", m_before, optimizer_checksum(self.optimizer_s))
        return steps

    def evaluate(self, dataset: ImageDataset) -> _Tally:
        self.model.eval()
        self.generator.eval()
        tally = _Tally()
        with torch.no_grad():
            for batch in batch_iterator(dataset, self.config.batch_size, self.config.seed, 0):
                output  = self._forward(batch.images)
                targets = self._soft_targets(output) if self.uses_exits else None
                self._tally_outputs(tally, output, batch.labels, targets)
        return tally

    def run_epoch(self, epoch: int, train_set: ImageDataset, val_set: Optional[ImageDataset]=None) -> List[MetricsRecord]:
        start = time.perf_counter()
        lr    = self.lr_s

        train_tally = self.train_model_phase(epoch, train_set)
        if self.is_generator_epoch(epoch):
            self.train_generator_phase(epoch, train_set)
        val_tally = self.evaluate(val_set) if val_set is not None else None

        self.lr_scheduler_s.step()
        if self.uses_generator:
            self.lr_scheduler_g.step()
        self.last_epoch = epoch + 1

        wall_ms = (time.perf_counter() - start) * 1000
        LOGGER.info(f"epoch {epoch} took {wall_ms:.0f} ms")
        if self.deterministic:
            wall_ms = 0.0

        names   = self.output_names()
        records = train_tally.records(epoch, "train", names, lr, wall_ms)
        if val_tally is not None:
            records += val_tally.records(epoch, "val", names, lr, wall_ms)
        return records

    def train(self, train_set: ImageDataset, val_set: Optional[ImageDataset]=None) -> List[MetricsRecord]:
        """
        Runs config.epochs epochs. Metrics are flushed and a checkpoint written at the end
        of every epoch; a numeric failure raises TrainingAborted naming the last good
        checkpoint.
        """
        if self.last_checkpoint is None:
            self.save_checkpoint("init.mdck")

        all_records = []
        for epoch in range(self.last_epoch, self.config.epochs):
            try:
                records = self.run_epoch(epoch, train_set, val_set)
            except NumericError as e:
                LOGGER.error(f"numeric failure in epoch {epoch}: {e}")
                if all(bool(torch.isfinite(p).all()) for p in self.checkpoint_tensors().values()):
                    self.save_checkpoint("abort.mdck")
                self.metrics_to_csv()
                raise TrainingAborted(str(e), checkpoint_path=self.last_checkpoint) from e

            self.log_metrics(records)
            self.metrics_to_csv()
            self.save_checkpoint(f"epoch_{epoch:04d}.mdck")
            all_records.extend(records)
            for r in records:
                if r.output == "final":
                    LOGGER.info(f"epoch {epoch} [{r.split}] final accuracy {r.accuracy:.4f}")
        return all_records


def evaluate_model(
        model: MultiExitNet,
        dataset: ImageDataset,
        batch_size: int=256,
        with_exits: bool=True,
        ensemble: bool=True
    ) -> Dict[str, float]:
    """
    Accuracy of every output on a dataset: exit_1 .. exit_{K-1}, final and (if asked)
    the uniform ensemble of all evaluated outputs. A model without exits reports an
    ensemble equal to its final output.
    """
    model.eval()
    correct = defaultdict(int)
    with torch.no_grad():
        for batch in batch_iterator(dataset, batch_size, seed=0, epoch=0):
            output = model(batch.images, with_exits=with_exits)
            for k, logits in enumerate(output.exit_logits):
                correct[f"exit_{k + 1}"] += count_correct(logits, batch.labels)
            correct["final"] += count_correct(output.final_logits, batch.labels)
            if ensemble:
                correct["ensemble"] += count_correct(ensemble_output(output.all_logits), batch.labels)
    return {name: c / len(dataset) for name, c in correct.items()}
