"""
SGD training, fine-tuning, and accuracy evaluation.

Update rule (per learnable array w with gradient g):
    v <- momentum * v + g + weight_decay * w
    w <- w - lr * v
"""
import logging
import sys
from dataclasses import asdict, dataclass

import numpy as np
from tqdm import tqdm

from modules import netgraph
from modules.batchnorm import BNMode
from modules.data import iterate_batches
from modules.errors import DataError, NumericError
from modules.tensor import softmax_cross_entropy

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 512


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float
    eval_acc: float
    lr: float

    def to_dict(self):
        return asdict(self)


class SGD:
    def __init__(self, params, momentum, weight_decay):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {key: np.zeros_like(arr) for key, arr in params.named_parameters()}

    def step(self, grads, lr):
        for key, w in self.params.named_parameters():
            g = grads[key]
            v = self.velocity[key]
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * w
            w -= (lr * v).astype(w.dtype, copy=False)


def evaluate_accuracy(spec, params, split, batch_size=EVAL_BATCH_SIZE):
    """Top-1 accuracy in EVAL mode; never mutates params."""
    if split is None or len(split) == 0:
        raise DataError("cannot evaluate on an empty split")
    correct = 0
    for images, labels in iterate_batches(split, batch_size):
        logits = netgraph.forward(spec, params, images, BNMode.EVAL)
        correct += int((logits.argmax(axis=1) == labels).sum())
    return correct / len(split)


def _show_progress():
    return sys.stderr.isatty()


def train(spec, params, train_split, config, eval_split=None, on_epoch=None, desc="train"):
    """Train params in place; return the per-epoch logs.

    on_epoch(EpochLog) is called after every epoch (the CLI streams it to JSONL).
    """
    optimizer = SGD(params, config.momentum, config.weight_decay)
    seed = 0 if config.seed is None else config.seed
    logs = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        total_loss, correct, seen = 0.0, 0, 0
        batches = iterate_batches(
            train_split, config.batch_size, seed=(seed, epoch), shuffle=True, hflip=config.hflip
        )
        n_batches = -(-len(train_split) // config.batch_size)
        for b, (images, labels) in enumerate(
            tqdm(batches, total=n_batches, desc=f"{desc} {epoch + 1}/{config.epochs}",
                 leave=False, disable=not _show_progress())
        ):
            try:
                logits, tape = netgraph.forward_train(spec, params, images)
                loss, grad = softmax_cross_entropy(logits, labels)
            except NumericError as e:
                raise NumericError(f"epoch {epoch + 1}, batch {b}: {e}") from e
            if not np.isfinite(loss):
                netgraph.raise_if_nonfinite(spec, tape, logits, epoch + 1, b)
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            try:
                grads = netgraph.backward(spec, params, tape, grad)
            except NumericError as e:
                raise NumericError(f"epoch {epoch + 1}, batch {b}: {e}") from e
            optimizer.step(grads, lr)

            total_loss += loss * len(labels)
            correct += int((logits.argmax(axis=1) == labels).sum())
            seen += len(labels)

        eval_acc = evaluate_accuracy(spec, params, eval_split) if eval_split is not None else float("nan")
        log = EpochLog(epoch + 1, total_loss / max(seen, 1), correct / max(seen, 1), eval_acc, lr)
        logger.info("%s epoch %d: loss=%.4f train_acc=%.4f eval_acc=%.4f lr=%g",
                    desc, log.epoch, log.loss, log.train_acc, log.eval_acc, lr)
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
    params.set_bn_mode(BNMode.EVAL)
    return logs


def finetune(spec, params, train_split, eval_split, config, on_epoch=None):
    """Fine-tune a pruned model; return the best per-epoch eval accuracy.

    With zero epochs the pre-fine-tune accuracy is returned.
    """
    if config.epochs == 0:
        return evaluate_accuracy(spec, params, eval_split)
    logs = train(spec, params, train_split, config, eval_split=eval_split, on_epoch=on_epoch, desc="finetune")
    return max(log.eval_acc for log in logs)
