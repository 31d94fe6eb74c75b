"""Label prediction for unlabeled training items.

Unlabeled items first get a weak label from their nearest labeled
anchor in each modality.  A small residual network then corrects that
weak label using both modalities' features.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import MULTI_LABEL, SINGLE_LABEL
from .errors import ConfigError, NumericError
from .losses import bce_loss, ce_logit_grad, ce_loss, l1_loss, wbce_loss
from .numeric import LayerStack, Sgd, clip_grad_norm, load_stack, save_stack, softmax

log = logging.getLogger(__name__)

RESIDUAL_CLIP = "residual_clip"
RESIDUAL_SOFTMAX = "residual_softmax"
LP_LOSSES = ("auto", "wbce", "bce", "l1", "ce")


def nearest_index(queries, anchors, chunk=256):
    """Index of the Euclidean-nearest anchor column for each query column.

    Exact ties go to the lowest anchor index.
    """
    queries = np.asarray(queries, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.ndim != 2 or anchors.shape[1] == 0:
        raise ConfigError("anchor set is empty")
    if queries.shape[0] != anchors.shape[0]:
        raise ConfigError(
            f"query dim {queries.shape[0]} does not match anchor dim {anchors.shape[0]}"
        )
    out = np.empty(queries.shape[1], dtype=np.int64)
    for start in range(0, queries.shape[1], chunk):
        q = queries[:, start:start + chunk]
        diff = q[:, :, None] - anchors[:, None, :]
        d2 = np.einsum("dnm,dnm->nm", diff, diff)
        out[start:start + chunk] = np.argmin(d2, axis=1)
    return out


def fuse_or(label_x, label_y, mode=MULTI_LABEL):
    """Combine two weak labels.

    Multi-label: elementwise logical OR.  Single-label: the x-side label
    wins when the two disagree, keeping the result one-hot.  Returns
    ``(fused, disagree)`` where ``disagree`` flags each column.
    """
    lx = np.asarray(label_x, dtype=np.float64)
    ly = np.asarray(label_y, dtype=np.float64)
    if lx.shape != ly.shape:
        raise ConfigError("labels to fuse have different shapes")
    disagree = np.any(lx != ly, axis=0)
    if mode == MULTI_LABEL:
        return np.maximum(lx, ly), disagree
    return lx.copy(), disagree


@dataclass
class NoisyAnnotation:
    """Weak labels for a batch of items, one column each."""

    labels: np.ndarray
    source: str
    disagree: np.ndarray
    substitute: np.ndarray = None


def assign_noisy_labels_paired(x, y, anchor_x, anchor_y, anchor_labels, mode):
    """Weak labels for paired items from the nearest anchor in each modality."""
    ix = nearest_index(x, anchor_x)
    iy = nearest_index(y, anchor_y)
    anchor_labels = np.asarray(anchor_labels, dtype=np.float64)
    fused, disagree = fuse_or(anchor_labels[:, ix], anchor_labels[:, iy], mode)
    return NoisyAnnotation(fused, "paired_or_fusion", disagree)


def assign_noisy_labels_unpaired(query, anchor_q, anchor_labels, train_q, train_other,
                                 train_labels, mode):
    """Weak labels for items of one modality that lack a partner.

    The query modality's own weak label comes from the nearest anchor.
    The nearest labeled training item in the same modality lends its
    partner as a substitute for the missing modality, and that item's
    label serves as the other modality's weak label.  The two are fused
    as in the paired case, with the query side taking priority for
    single-label data.
    """
    train_q = np.asarray(train_q, dtype=np.float64)
    if train_q.ndim != 2 or train_q.shape[1] == 0:
        raise ConfigError("labeled train set is empty")
    anchor_labels = np.asarray(anchor_labels, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.float64)
    iq = nearest_index(query, anchor_q)
    it = nearest_index(query, train_q)
    substitute = np.asarray(train_other, dtype=np.float64)[:, it]
    fused, disagree = fuse_or(anchor_labels[:, iq], train_labels[:, it], mode)
    return NoisyAnnotation(fused, "unpaired_substitute", disagree, substitute)


def lp_accuracy(predicted, truth, mode):
    """Single-label: argmax agreement rate.  Multi-label: one minus the mean of
    the error rate on true ones and the error rate on true zeros (threshold 0.5).
    """
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigError(f"prediction shape {p.shape} != truth shape {t.shape}")
    if p.ndim == 1:
        p, t = p[:, None], t[:, None]
    if mode == SINGLE_LABEL:
        return float(np.mean(np.argmax(p, axis=0) == np.argmax(t, axis=0)))
    ones = t == 1
    zeros = ~ones
    err_ones = float(np.mean(p[ones] < 0.5)) if ones.any() else 0.0
    err_zeros = float(np.mean(p[zeros] >= 0.5)) if zeros.any() else 0.0
    return 1.0 - 0.5 * (err_ones + err_zeros)


def hard_labels(predicted, mode):
    """Binary view of soft predictions: argmax one-hot or threshold at 0.5."""
    p = np.asarray(predicted, dtype=np.float64)
    if mode == SINGLE_LABEL:
        out = np.zeros_like(p)
        out[np.argmax(p, axis=0), np.arange(p.shape[1])] = 1.0
        return out
    return (p >= 0.5).astype(np.float64)


class LpNetwork:
    """Three input branches, a two-layer trunk and an identity path from the weak label.

    The trunk's last layer starts at zero, so an untrained network
    reproduces its weak-label input (clipped or softmaxed).
    """

    def __init__(self, d_x, d_y, d_c, hidden, output_mode, rng, hidden_activation="tanh"):
        if output_mode not in (RESIDUAL_CLIP, RESIDUAL_SOFTMAX):
            raise ConfigError(f"unknown LP output mode {output_mode!r}")
        self.output_mode = output_mode
        act = hidden_activation
        self.branch_x = LayerStack.build([d_x, hidden], [act], rng)
        self.branch_y = LayerStack.build([d_y, hidden], [act], rng)
        self.branch_label = LayerStack.build([d_c, hidden], [act], rng)
        self.trunk = LayerStack.build([3 * hidden, hidden, d_c], [act, "none"], rng,
                                      zero_last=True)
        self._check()
        self._cache = None

    def _check(self):
        total = self.branch_x.d_out + self.branch_y.d_out + self.branch_label.d_out
        if self.trunk.d_in != total:
            raise ConfigError(f"trunk expects {self.trunk.d_in} inputs, branches give {total}")
        if self.trunk.d_out != self.branch_label.d_in:
            raise ConfigError("trunk output must match the label dimension")

    @property
    def dims(self):
        return self.branch_x.d_in, self.branch_y.d_in, self.branch_label.d_in

    @property
    def label_mode(self):
        return MULTI_LABEL if self.output_mode == RESIDUAL_CLIP else SINGLE_LABEL

    def stacks(self):
        return [self.branch_x, self.branch_y, self.branch_label, self.trunk]

    def parameters(self):
        return [p for s in self.stacks() for p in s.parameters()]

    def _inputs(self, x, y, noisy):
        x, y, noisy = (np.asarray(a, dtype=np.float64) for a in (x, y, noisy))
        x, y, noisy = (a[:, None] if a.ndim == 1 else a for a in (x, y, noisy))
        d_x, d_y, d_c = self.dims
        if x.shape[0] != d_x or y.shape[0] != d_y or noisy.shape[0] != d_c:
            raise ConfigError(
                f"LP inputs have dims {x.shape[0]}/{y.shape[0]}/{noisy.shape[0]}, "
                f"network expects {d_x}/{d_y}/{d_c}"
            )
        if not x.shape[1] == y.shape[1] == noisy.shape[1]:
            raise ConfigError("LP inputs have different batch sizes")
        return x, y, noisy

    def _output(self, noisy, g):
        s = noisy + g
        if self.output_mode == RESIDUAL_CLIP:
            return s, np.clip(s, 0.0, 1.0)
        return s, softmax(s)

    def forward(self, x, y, noisy):
        x, y, noisy = self._inputs(x, y, noisy)
        h = np.vstack([self.branch_x.forward(x), self.branch_y.forward(y),
                       self.branch_label.forward(noisy)])
        g = self.trunk.forward(h)
        s, out = self._output(noisy, g)
        self._cache = (s, out)
        return out

    def predict(self, x, y, noisy):
        x, y, noisy = self._inputs(x, y, noisy)
        h = np.vstack([self.branch_x.predict(x), self.branch_y.predict(y),
                       self.branch_label.predict(noisy)])
        return self._output(noisy, self.trunk.predict(h))[1]

    def backward_from_residual(self, grad_g):
        """Backpropagate a gradient w.r.t. the trunk output; returns parameter grads."""
        trunk_grads, grad_h = self.trunk.backward(grad_g)
        hid = self.branch_x.d_out
        gx, _ = self.branch_x.backward(grad_h[:hid])
        gy, _ = self.branch_y.backward(grad_h[hid:2 * hid])
        gl, _ = self.branch_label.backward(grad_h[2 * hid:])
        return gx + gy + gl + trunk_grads

    def backward(self, grad_out):
        """Backpropagate a gradient w.r.t. the network output."""
        s, out = self._cache
        if self.output_mode == RESIDUAL_CLIP:
            grad_g = grad_out * ((s >= 0.0) & (s <= 1.0))
        else:
            grad_g = out * (grad_out - (grad_out * out).sum(axis=0, keepdims=True))
        return self.backward_from_residual(grad_g)

    def snapshot(self):
        return [p.copy() for p in self.parameters()]

    def restore(self, snap):
        for p, s in zip(self.parameters(), snap):
            p[...] = s

    def save(self, out_dir, extra=None):
        os.makedirs(out_dir, exist_ok=True)
        for name, stack in zip(("branch_x", "branch_y", "branch_label", "trunk"), self.stacks()):
            save_stack(stack, os.path.join(out_dir, f"lp_{name}.txt"))
        d_x, d_y, d_c = self.dims
        meta = dict(output_mode=self.output_mode, d_x=d_x, d_y=d_y, d_c=d_c)
        if extra:
            meta.update(extra)
        with open(os.path.join(out_dir, "lp.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, out_dir):
        with open(os.path.join(out_dir, "lp.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        net = cls.__new__(cls)
        net.output_mode = meta["output_mode"]
        net.branch_x, net.branch_y, net.branch_label, net.trunk = (
            load_stack(os.path.join(out_dir, f"lp_{n}.txt"))
            for n in ("branch_x", "branch_y", "branch_label", "trunk")
        )
        net._cache = None
        net._check()
        return net


def lp_forward(net, x, y, noisy):
    return net.predict(x, y, noisy)


@dataclass
class LpConfig:
    hidden: int = 1000
    learning_rate: float = 0.005
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    loss: str = "auto"
    hidden_activation: str = "tanh"
    reduction: str = "sum"
    grad_clip: float = None

    def validate(self):
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive")
        if self.loss not in LP_LOSSES:
            raise ConfigError(f"unknown LP loss {self.loss!r}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")


@dataclass
class LpTrainState:
    epoch: int = 0
    best_val_accuracy: float = -1.0
    patience_counter: int = 0
    best_epoch: int = 0
    log: list = field(default_factory=list)


def _lp_loss_and_grad(net, loss, target, pred, weights):
    """Loss value and gradient w.r.t. the trunk output ``g``."""
    if net.output_mode == RESIDUAL_SOFTMAX:
        if loss not in ("auto", "ce"):
            raise ConfigError(f"loss {loss!r} is not available for single-label data")
        value = ce_loss(target, pred).value
        return value, ce_logit_grad(target, pred)
    if loss in ("auto", "wbce"):
        lv = wbce_loss(target, pred, weights)
    elif loss == "bce":
        lv = bce_loss(target, pred)
    elif loss == "l1":
        lv = l1_loss(target, pred)
    else:
        raise ConfigError(f"loss {loss!r} is not available for multi-label data")
    s, _ = net._cache
    return lv.value, lv.grad * ((s >= 0.0) & (s <= 1.0))


def train_lp(net, train, val, config, rng, weights=None):
    """Minibatch SGD on the label-prediction loss with validation early stopping.

    ``train`` and ``val`` are ``(x, y, noisy, truth)`` tuples of column
    matrices.  The network is left at the parameters with the best
    validation accuracy (the untrained network counts as epoch 0).
    Returns the :class:`LpTrainState` whose ``log`` lists
    ``(epoch, train_loss, val_accuracy)`` rows.
    """
    config.validate()
    x, y, noisy, truth = train
    vx, vy, vnoisy, vtruth = val
    n = x.shape[1]
    mode = net.label_mode
    if weights is None:
        weights = np.ones(truth.shape[0])
    opt = Sgd(net.parameters(), config.learning_rate)
    state = LpTrainState()
    best = net.snapshot()
    state.best_val_accuracy = lp_accuracy(net.predict(vx, vy, vnoisy), vtruth, mode)
    state.log.append((0, float("nan"), state.best_val_accuracy))

    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            pred = net.forward(x[:, idx], y[:, idx], noisy[:, idx])
            value, grad_g = _lp_loss_and_grad(net, config.loss, truth[:, idx], pred, weights)
            if not np.isfinite(value):
                net.restore(best)
                err = NumericError(f"non-finite LP loss at epoch {epoch}")
                err.checkpoint = best
                raise err
            if config.reduction == "mean":
                value, grad_g = value / idx.size, grad_g / idx.size
            total += value
            grads = net.backward_from_residual(grad_g)
            if config.grad_clip is not None:
                grads = clip_grad_norm(grads, config.grad_clip)
            opt.step(grads)
        acc = lp_accuracy(net.predict(vx, vy, vnoisy), vtruth, mode)
        state.log.append((epoch, total, acc))
        if acc > state.best_val_accuracy:
            state.best_val_accuracy = acc
            state.best_epoch = epoch
            state.patience_counter = 0
            best = net.snapshot()
        else:
            state.patience_counter += 1
            if state.patience_counter >= config.patience:
                break
    net.restore(best)
    log.debug("LP stopped at epoch %d, best val accuracy %.4f at epoch %d",
              state.epoch, state.best_val_accuracy, state.best_epoch)
    return state


def predict_labels(net, x, y, noisy, mode=None):
    """Soft label predictions in ``[0, 1]`` for a batch of items."""
    if mode is not None and mode != net.label_mode:
        raise ConfigError(f"network predicts {net.label_mode} labels, data is {mode}")
    return net.predict(x, y, noisy)


@dataclass
class LpStageResult:
    """Everything the representation stage and the reports need from label prediction."""

    net: LpNetwork
    state: LpTrainState
    pred_x: np.ndarray
    pred_y: np.ndarray
    noisy_x: np.ndarray
    noisy_y: np.ndarray
    metrics: dict


def run_label_prediction(data, split, config, rng, output_mode=None):
    """Weak-label generation, LP training and prediction for the unlabeled items.

    ``pred_x``/``pred_y`` hold soft labels for ``split.unlabeled_x_idx``
    and ``split.unlabeled_y_idx``; with paired unlabeled data the two are
    identical.  ``metrics`` reports noisy and predicted accuracy against
    ground truth when the dataset provides it.
    """
    from .losses import positive_weights

    mode = data.label_mode
    if output_mode is None:
        output_mode = RESIDUAL_CLIP if mode == MULTI_LABEL else RESIDUAL_SOFTMAX
    fx, fy, labels = data.features_x, data.features_y, data.labels
    nn, val, tr = split.nn_idx, split.val_idx, split.train_idx
    ax, ay, al = fx[:, nn], fy[:, nn], labels[:, nn]

    def paired(idx):
        return assign_noisy_labels_paired(fx[:, idx], fy[:, idx], ax, ay, al, mode).labels

    train = (fx[:, tr], fy[:, tr], paired(tr), labels[:, tr])
    val_set = (fx[:, val], fy[:, val], paired(val), labels[:, val])
    weights = positive_weights(labels[:, tr]) if mode == MULTI_LABEL else None

    net = LpNetwork(data.d_x, data.d_y, data.d_c, config.hidden, output_mode, rng,
                    config.hidden_activation)
    state = train_lp(net, train, val_set, config, rng, weights)

    ux, uy = split.unlabeled_x_idx, split.unlabeled_y_idx
    if not split.unpaired:
        noisy = paired(ux)
        pred = predict_labels(net, fx[:, ux], fy[:, ux], noisy)
        noisy_x = noisy_y = noisy
        pred_x = pred_y = pred
    else:
        ann_x = assign_noisy_labels_unpaired(fx[:, ux], ax, al, fx[:, tr], fy[:, tr],
                                             labels[:, tr], mode)
        ann_y = assign_noisy_labels_unpaired(fy[:, uy], ay, al, fy[:, tr], fx[:, tr],
                                             labels[:, tr], mode)
        noisy_x, noisy_y = ann_x.labels, ann_y.labels
        pred_x = predict_labels(net, fx[:, ux], ann_x.substitute, noisy_x)
        pred_y = predict_labels(net, ann_y.substitute, fy[:, uy], noisy_y)

    metrics = {"lp_best_val_accuracy": state.best_val_accuracy,
               "lp_epochs": state.epoch, "lp_best_epoch": state.best_epoch}
    if data.fully_labeled and (ux.size or uy.size):
        if split.unpaired:
            truth = np.hstack([labels[:, ux], labels[:, uy]])
            noisy_all = np.hstack([noisy_x, noisy_y])
            pred_all = np.hstack([pred_x, pred_y])
        else:
            truth, noisy_all, pred_all = labels[:, ux], noisy_x, pred_x
        metrics["noisy_accuracy"] = lp_accuracy(noisy_all, truth, mode)
        metrics["lp_accuracy"] = lp_accuracy(pred_all, truth, mode)
    return LpStageResult(net, state, pred_x, pred_y, noisy_x, noisy_y, metrics)
