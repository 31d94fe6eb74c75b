"""Common representation learning in label space.

Each modality has an encoder mapping features to a ``d_c``-dimensional
code and a decoder mapping a code back to features.  Decoders are
trained crosswise: the x decoder reconstructs x from the y code and
vice versa.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .dataset import MULTI_LABEL, SINGLE_LABEL
from .errors import ConfigError, NumericError, ValidationError
from .label_prediction import hard_labels
from .losses import ce_logit_grad, ce_loss, dsim_loss, l1_loss, sim_loss, wbce_loss
from .numeric import LayerStack, Sgd, activate, activation_backward, load_stack, save_stack

log = logging.getLogger(__name__)

COMPONENTS = ("lab", "cross", "sim", "dsim", "unlab")
DIVERGENCE_LIMIT = 1e6
ENUMERATE_LIMIT = 4_000_000


@dataclass
class CrlConfig:
    alpha1: float = 10.0
    alpha2: float = 1.0
    alpha3: float = 10.0
    alpha4: float = 1.0
    beta: float = 1.0
    tau1: float = 0.5
    tau2: float = 0.1
    mu: float = 1.0
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 100
    pairs_per_batch: int = None
    hidden: int = 5000
    hidden_activation: str = "tanh"
    reduction: str = "sum"

    def validate(self):
        weights = (self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.beta)
        if any(w < 0 for w in weights):
            raise ConfigError("loss weights must be non-negative")
        if not self.tau1 > self.tau2:
            raise ConfigError("tau1 must exceed tau2")
        if not self.mu > 0:
            raise ConfigError("margin mu must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.hidden < 1:
            raise ConfigError("batch_size, epochs and hidden must be positive")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError("reduction must be 'sum' or 'mean'")

    @property
    def n_pairs(self):
        return self.pairs_per_batch if self.pairs_per_batch is not None else 2 * self.batch_size

    def weight(self, component):
        return {"lab": self.alpha1, "cross": self.alpha2, "sim": self.alpha3,
                "dsim": self.alpha4, "unlab": self.beta}[component]

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown CRL settings {sorted(unknown)}")
        return cls(**d)


class CrlModel:
    def __init__(self, d_x, d_y, d_c, hidden, label_mode, rng, hidden_activation="tanh"):
        if label_mode not in (SINGLE_LABEL, MULTI_LABEL):
            raise ConfigError(f"unknown label mode {label_mode!r}")
        self.final_activation = "sigmoid" if label_mode == MULTI_LABEL else "softmax"
        hidden_acts = [hidden_activation, hidden_activation, "none"]
        self.encoder_x = LayerStack.build([d_x, hidden, hidden, d_c], hidden_acts, rng)
        self.encoder_y = LayerStack.build([d_y, hidden, hidden, d_c], hidden_acts, rng)
        self.decoder_x = LayerStack.build([d_c, hidden, hidden, d_x], hidden_acts, rng)
        self.decoder_y = LayerStack.build([d_c, hidden, hidden, d_y], hidden_acts, rng)
        self._check()

    def _check(self):
        d_c = self.encoder_x.d_out
        if self.encoder_y.d_out != d_c or self.decoder_x.d_in != d_c or self.decoder_y.d_in != d_c:
            raise ConfigError("encoder outputs and decoder inputs must all equal d_c")
        if self.decoder_x.d_out != self.encoder_x.d_in or self.decoder_y.d_out != self.encoder_y.d_in:
            raise ConfigError("decoder outputs must match modality dimensions")

    @property
    def label_mode(self):
        return MULTI_LABEL if self.final_activation == "sigmoid" else SINGLE_LABEL

    @property
    def dims(self):
        return self.encoder_x.d_in, self.encoder_y.d_in, self.encoder_x.d_out

    def stacks(self):
        return [self.encoder_x, self.encoder_y, self.decoder_x, self.decoder_y]

    def parameters(self):
        return [p for s in self.stacks() for p in s.parameters()]

    def encoder(self, modality):
        if modality == "x":
            return self.encoder_x
        if modality == "y":
            return self.encoder_y
        raise ConfigError(f"unknown modality {modality!r}")

    def save(self, out_dir, extra=None):
        os.makedirs(out_dir, exist_ok=True)
        for name, stack in zip(("encoder_x", "encoder_y", "decoder_x", "decoder_y"), self.stacks()):
            save_stack(stack, os.path.join(out_dir, f"crl_{name}.txt"))
        d_x, d_y, d_c = self.dims
        meta = dict(mode=self.label_mode, d_x=d_x, d_y=d_y, d_c=d_c)
        if extra:
            meta.update(extra)
        with open(os.path.join(out_dir, "crl.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, out_dir):
        with open(os.path.join(out_dir, "crl.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        model = cls.__new__(cls)
        model.final_activation = "sigmoid" if meta["mode"] == MULTI_LABEL else "softmax"
        model.encoder_x, model.encoder_y, model.decoder_x, model.decoder_y = (
            load_stack(os.path.join(out_dir, f"crl_{n}.txt"))
            for n in ("encoder_x", "encoder_y", "decoder_x", "decoder_y")
        )
        model._check()
        return model


def encode(model, modality, features):
    """Return ``(pre_activation, representation)`` without touching the backprop cache."""
    z = model.encoder(modality).predict(features)
    return z, activate(z, model.final_activation)


# ---------------------------------------------------------------------------
# pair construction


def label_similarity(labels_a, labels_b):
    """Cosine similarity between every column of ``labels_a`` and of ``labels_b``."""
    a = np.asarray(labels_a, dtype=np.float64)
    b = np.asarray(labels_b, dtype=np.float64)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValidationError("similarity is undefined for an all-zero label vector")
    return (a.T @ b) / np.outer(na, nb)


def _pair_codes(labels_a, labels_b, mode, tau1, tau2):
    """+1 similar, -1 dissimilar, 0 ignored, for every (a, b) column pair."""
    if mode == SINGLE_LABEL:
        same = np.argmax(labels_a, axis=0)[:, None] == np.argmax(labels_b, axis=0)[None, :]
        return np.where(same, 1, -1)
    s = label_similarity(labels_a, labels_b)
    return np.where(s >= tau1, 1, np.where(s <= tau2, -1, 0))


@dataclass
class PairSets:
    similar: np.ndarray
    dissimilar: np.ndarray


def build_pair_sets(labels, mode, tau1=0.5, tau2=0.1):
    """Enumerate every cross-modal pair ``(i, j)`` of labeled items into similar/dissimilar sets.

    Arrays have shape ``(k, 2)``.  Multi-label pairs whose similarity
    falls strictly between the thresholds are dropped.
    """
    if not tau1 > tau2:
        raise ConfigError("tau1 must exceed tau2")
    labels = np.asarray(labels, dtype=np.float64)
    codes = _pair_codes(labels, labels, mode, tau1, tau2)
    return PairSets(np.argwhere(codes == 1), np.argwhere(codes == -1))


class PairSampler:
    """Uniform sampling from the similar and dissimilar pair sets of the labeled items.

    Small label sets are enumerated once; large ones fall back to
    rejection sampling over uniformly drawn pairs.
    """

    def __init__(self, labels, mode, tau1, tau2):
        self.labels = np.asarray(labels, dtype=np.float64)
        self.mode, self.tau1, self.tau2 = mode, tau1, tau2
        n = self.labels.shape[1]
        self.sets = None
        if n * n <= ENUMERATE_LIMIT:
            self.sets = build_pair_sets(self.labels, mode, tau1, tau2)
        elif mode == MULTI_LABEL:
            label_similarity(self.labels, self.labels[:, :1])

    def _draw(self, rng, pool, k):
        if k == 0 or pool.shape[0] == 0:
            return np.empty((0, 2), dtype=np.int64)
        return pool[rng.integers(0, pool.shape[0], size=k)]

    def _reject(self, rng, want, k, max_rounds=50):
        n = self.labels.shape[1]
        found = []
        have = 0
        for _ in range(max_rounds):
            if have >= k:
                break
            cand = rng.integers(0, n, size=(4 * k, 2))
            codes = np.array([_pair_codes(self.labels[:, [i]], self.labels[:, [j]], self.mode,
                                          self.tau1, self.tau2)[0, 0] for i, j in cand])
            keep = cand[codes == want]
            found.append(keep)
            have += keep.shape[0]
        if not found:
            return np.empty((0, 2), dtype=np.int64)
        return np.vstack(found)[:k]

    def sample(self, rng, k):
        """Return ``(similar, dissimilar)`` index arrays of up to ``k`` pairs each."""
        if self.sets is not None:
            return self._draw(rng, self.sets.similar, k), self._draw(rng, self.sets.dissimilar, k)
        return self._reject(rng, 1, k), self._reject(rng, -1, k)


# ---------------------------------------------------------------------------
# composite loss


@dataclass
class LabeledBatch:
    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray


@dataclass
class UnlabeledBatch:
    """Unlabeled items per modality with soft labels from the label predictor."""

    x: np.ndarray
    labels_x: np.ndarray
    y: np.ndarray
    labels_y: np.ndarray


@dataclass
class PairBatch:
    """Cross-modal pairs: column ``k`` of ``sim_x`` pairs with column ``k`` of ``sim_y``."""

    sim_x: np.ndarray
    sim_y: np.ndarray
    dsim_x: np.ndarray
    dsim_y: np.ndarray


@dataclass
class LossBreakdown:
    lab: float
    cross: float
    sim: float
    dsim: float
    unlab: float
    total: float

    def as_dict(self):
        return asdict(self)


def _empty(d):
    return np.empty((d, 0))


def _label_term(mode, activation_out, targets, weights, hard_targets=False):
    """Label loss on activated codes; returns ``(value, grad_a, grad_z)``.

    For softmax codes the cross-entropy gradient goes straight to the
    logits; for sigmoid codes it is returned w.r.t. the activation.
    """
    if targets.shape[1] == 0:
        zeros = np.zeros_like(activation_out)
        return 0.0, zeros, zeros
    if mode == SINGLE_LABEL:
        t = hard_labels(targets, SINGLE_LABEL) if hard_targets else targets
        value = ce_loss(t, activation_out).value
        return value, np.zeros_like(activation_out), ce_logit_grad(t, activation_out)
    lv = wbce_loss(targets, activation_out, weights)
    return lv.value, lv.grad, np.zeros_like(activation_out)


def crl_batch_loss(model, labeled, unlabeled, pairs, config, weights=None, with_grads=True):
    """Weighted composite loss for one minibatch.

    Returns ``(LossBreakdown, grads)`` where the breakdown holds the
    unweighted components plus the weighted total and ``grads`` aligns
    with ``model.parameters()`` (``None`` when ``with_grads`` is false).
    """
    d_x, d_y, d_c = model.dims
    mode = model.label_mode
    if weights is None:
        weights = np.ones(d_c)
    if unlabeled is None:
        unlabeled = UnlabeledBatch(_empty(d_x), _empty(d_c), _empty(d_y), _empty(d_c))
    if pairs is None:
        pairs = PairBatch(_empty(d_x), _empty(d_y), _empty(d_x), _empty(d_y))
    nl = labeled.x.shape[1]
    if nl == 0:
        raise ConfigError("labeled batch is empty")
    n_sim, n_dsim = pairs.sim_x.shape[1], pairs.dsim_x.shape[1]
    n_ux, n_uy = unlabeled.x.shape[1], unlabeled.y.shape[1]
    mean = config.reduction == "mean"

    def scale(n):
        return 1.0 / n if mean and n else 1.0

    xs = np.hstack([labeled.x, pairs.sim_x, pairs.dsim_x, unlabeled.x])
    ys = np.hstack([labeled.y, pairs.sim_y, pairs.dsim_y, unlabeled.y])
    enc_x, enc_y = model.encoder_x, model.encoder_y
    zx, zy = enc_x.forward(xs), enc_y.forward(ys)
    ax, ay = activate(zx, model.final_activation), activate(zy, model.final_activation)
    g_ax, g_zx = np.zeros_like(ax), np.zeros_like(zx)
    g_ay, g_zy = np.zeros_like(ay), np.zeros_like(zy)
    values = {}
    lab_sl = slice(0, nl)
    sim_sl = slice(nl, nl + n_sim)
    dsim_sl = slice(nl + n_sim, nl + n_sim + n_dsim)

    # label loss on both modalities
    k1 = config.alpha1 * scale(nl)
    vx, gax, gzx = _label_term(mode, ax[:, lab_sl], labeled.labels, weights)
    vy, gay, gzy = _label_term(mode, ay[:, lab_sl], labeled.labels, weights)
    values["lab"] = (vx + vy) * scale(nl)
    g_ax[:, lab_sl] += k1 * gax
    g_zx[:, lab_sl] += k1 * gzx
    g_ay[:, lab_sl] += k1 * gay
    g_zy[:, lab_sl] += k1 * gzy

    # cross reconstruction: y from the x code and x from the y code
    k2 = config.alpha2 * scale(nl)
    y_hat = model.decoder_y.forward(ax[:, lab_sl])
    x_hat = model.decoder_x.forward(ay[:, lab_sl])
    cy = l1_loss(labeled.y, y_hat)
    cx = l1_loss(labeled.x, x_hat)
    values["cross"] = (cx.value + cy.value) * scale(nl)
    grads_dec_y, g_in_y = model.decoder_y.backward(k2 * cy.grad)
    grads_dec_x, g_in_x = model.decoder_x.backward(k2 * cx.grad)
    g_ax[:, lab_sl] += g_in_y
    g_ay[:, lab_sl] += g_in_x

    # similarity / dissimilarity on pre-activation codes
    k3 = config.alpha3 * scale(n_sim)
    s = sim_loss(zx[:, sim_sl], zy[:, sim_sl])
    values["sim"] = s.value * scale(n_sim)
    g_zx[:, sim_sl] += k3 * s.grad
    g_zy[:, sim_sl] -= k3 * s.grad
    k4 = config.alpha4 * scale(n_dsim)
    if n_dsim:
        ds = dsim_loss(zx[:, dsim_sl], zy[:, dsim_sl], config.mu)
        values["dsim"] = ds.value * scale(n_dsim)
        g_zx[:, dsim_sl] += k4 * ds.grad
        g_zy[:, dsim_sl] -= k4 * ds.grad
    else:
        values["dsim"] = 0.0

    # label loss against predicted labels of unlabeled items
    ux_sl = slice(nl + n_sim + n_dsim, nl + n_sim + n_dsim + n_ux)
    uy_sl = slice(nl + n_sim + n_dsim, nl + n_sim + n_dsim + n_uy)
    ku = config.beta * scale(n_ux + n_uy)
    if config.beta > 0 and (n_ux or n_uy):
        vux, gaux, gzux = _label_term(mode, ax[:, ux_sl], unlabeled.labels_x, weights, True)
        vuy, gauy, gzuy = _label_term(mode, ay[:, uy_sl], unlabeled.labels_y, weights, True)
        values["unlab"] = (vux + vuy) * scale(n_ux + n_uy)
        g_ax[:, ux_sl] += ku * gaux
        g_zx[:, ux_sl] += ku * gzux
        g_ay[:, uy_sl] += ku * gauy
        g_zy[:, uy_sl] += ku * gzuy
    else:
        values["unlab"] = 0.0

    for name, v in values.items():
        if not np.isfinite(v):
            raise NumericError(f"non-finite CRL loss component '{name}'")
    total = sum(config.weight(c) * values[c] for c in COMPONENTS)
    breakdown = LossBreakdown(total=total, **values)
    if not with_grads:
        return breakdown, None

    g_zx += activation_backward(ax, g_ax, model.final_activation)
    g_zy += activation_backward(ay, g_ay, model.final_activation)
    grads_enc_x, _ = enc_x.backward(g_zx)
    grads_enc_y, _ = enc_y.backward(g_zy)
    return breakdown, grads_enc_x + grads_enc_y + grads_dec_x + grads_dec_y


# ---------------------------------------------------------------------------
# training


@dataclass
class CrlData:
    """Training inputs for the representation stage.

    ``unlabeled_*`` may be empty; ``pred_*`` are the matching soft labels.
    """

    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray
    unlabeled_x: np.ndarray = None
    pred_x: np.ndarray = None
    unlabeled_y: np.ndarray = None
    pred_y: np.ndarray = None

    @property
    def has_unlabeled(self):
        return any(a is not None and a.shape[1] > 0 for a in (self.unlabeled_x, self.unlabeled_y))


class _Cycler:
    """Endless reshuffled passes over ``range(n)`` yielding fixed-size batches."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n) if n else np.empty(0, dtype=np.int64)
        self.pos = 0

    def take(self, k):
        if self.n == 0:
            return np.empty(0, dtype=np.int64)
        out = []
        while k > 0:
            if self.pos >= self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            chunk = self.order[self.pos:self.pos + k]
            out.append(chunk)
            self.pos += chunk.size
            k -= chunk.size
        return np.concatenate(out)


def train_crl(model, data, config, rng, weights=None):
    """Minibatch SGD on the composite loss; returns per-epoch log rows.

    Each row is ``(epoch, lab, cross, sim, dsim, unlab, total)`` with the
    components summed over the epoch; row 0 is the untrained model.  An
    epoch is one pass over the labeled items; each step also draws a
    batch of unlabeled items of each modality and ``config.n_pairs``
    similar and dissimilar pairs.
    """
    config.validate()
    d_x, d_y, d_c = model.dims
    mode = model.label_mode
    use_unlabeled = config.beta > 0 and data.has_unlabeled
    if data.has_unlabeled and (data.pred_x is None and data.pred_y is None):
        raise ConfigError("unlabeled items supplied without predicted labels")
    ux = data.unlabeled_x if data.unlabeled_x is not None else _empty(d_x)
    uy = data.unlabeled_y if data.unlabeled_y is not None else _empty(d_y)
    px = data.pred_x if data.pred_x is not None else _empty(d_c)
    py = data.pred_y if data.pred_y is not None else _empty(d_c)

    sampler = PairSampler(data.labels, mode, config.tau1, config.tau2)
    opt = Sgd(model.parameters(), config.learning_rate)
    cyc_x = _Cycler(ux.shape[1] if use_unlabeled else 0, rng)
    cyc_y = _Cycler(uy.shape[1] if use_unlabeled else 0, rng)
    n = data.x.shape[1]

    def run_epoch(epoch, update):
        sums = dict.fromkeys(COMPONENTS + ("total",), 0.0)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            labeled = LabeledBatch(data.x[:, idx], data.y[:, idx], data.labels[:, idx])
            sim, dsim = sampler.sample(rng, config.n_pairs)
            pairs = PairBatch(data.x[:, sim[:, 0]], data.y[:, sim[:, 1]],
                              data.x[:, dsim[:, 0]], data.y[:, dsim[:, 1]])
            unlabeled = None
            if use_unlabeled:
                ix, iy = cyc_x.take(idx.size), cyc_y.take(idx.size)
                unlabeled = UnlabeledBatch(ux[:, ix], px[:, ix], uy[:, iy], py[:, iy])
            loss, grads = crl_batch_loss(model, labeled, unlabeled, pairs, config, weights,
                                         with_grads=update)
            if loss.total > DIVERGENCE_LIMIT:
                raise NumericError(
                    f"CRL loss diverged at epoch {epoch}: "
                    + ", ".join(f"{k}={v:.4g}" for k, v in loss.as_dict().items())
                )
            if update:
                opt.step(grads)
            for k, v in loss.as_dict().items():
                sums[k] += v
        return (epoch,) + tuple(sums[k] for k in COMPONENTS + ("total",))

    # epoch 0 measures the untrained model on one pass without updating it
    rows = [run_epoch(0, False)]
    for epoch in range(1, config.epochs + 1):
        rows.append(run_epoch(epoch, True))
    return rows
