"""Streaming adaptation loop: store/evict, BN-affine update, prototype
refresh, prediction.

Per incoming segment the adapter (1) inserts it into the memory bank
(step 1 instead fills the bank by augmentation and seeds prototypes from
the classifier weights), (2) discards the worst item by removal score,
(3) takes one optimizer step on the BN scale/shift parameters against the
entropy + energy objective over the bank batch and freshly augmented
copies, (4) folds the adapted bank features into the class prototypes,
and (5) predicts the segment from a fresh forward pass.

Activations of the layers below the first BN layer never change during
adaptation (those weights are frozen), so each bank item caches its
first-block output; per step only the incoming segment and the augmented
batch pay the full forward cost.
"""

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from . import memory, prototypes
from .fastpath import FrozenSandwich
from .losses import LossWeights, softmax, total_loss
from .network import SCOPE_BN_AFFINE, ForwardResult
from .optim import ADAMW, OptState, optimizer_step
from .tensor import require_finite

VARIANT_FULL = "full"
VARIANT_NO_BN = "no_bn"        # prototypes over the bank, no BN updates
VARIANT_NO_MEM = "no_mem"      # single-instance objective, classifier head
VARIANT_NO_PL = "no_pl"        # bank objective, classifier head
VARIANTS = (VARIANT_FULL, VARIANT_NO_BN, VARIANT_NO_MEM, VARIANT_NO_PL)


@dataclass
class AdaptConfig:
    lr: float = 0.001
    weight_decay: float = 0.1
    optimizer: str = ADAMW
    adaptation_steps_per_sample: int = 1
    bank_capacity: int = 16
    lam_ent: float = 2.0
    lam_eng: float = 0.01
    m_in: float = -15.0
    m_out: float = -7.0
    tau: float = 1.0
    alpha: float = 0.9
    bn_mode: str = L.BN_FIXED_SOURCE
    variant: str = VARIANT_FULL
    seed: int = 0
    sigma_rel: float = 0.1
    n_segments: int = 8
    evict_direction: str = "highest"
    filter_direction: str = prototypes.FILTER_ABOVE

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.bn_mode not in L.BN_MODES:
            raise ValueError(f"unknown BN mode {self.bn_mode!r}")
        if self.adaptation_steps_per_sample < 1:
            raise ValueError("adaptation_steps_per_sample must be >= 1")

    def loss_weights(self):
        return LossWeights(lam_ent=self.lam_ent, lam_eng=self.lam_eng,
                           m_in=self.m_in, m_out=self.m_out, tau=self.tau)


@dataclass
class Prediction:
    step: int
    pred: int
    probs: np.ndarray
    feature: np.ndarray
    logits: np.ndarray
    predictor: str               # "prototype" or "classifier"
    diagnostics: dict = field(default_factory=dict)


@dataclass
class LogEntry:
    step: int
    true_label: int | None
    pred: int
    probs: list
    predictor: str
    latency_ms: float
    loss_total: float | None = None
    loss_entropy: float | None = None
    loss_energy: float | None = None
    evicted_score: float | None = None
    feature: list | None = None


class AdapterState:
    """Owns the network, optimizer, bank, and prototypes for one stream."""

    def __init__(self, net, config):
        self.net = net
        self.config = config
        net.set_bn_mode(config.bn_mode)
        self.weights = config.loss_weights()
        self.opt = OptState(kind=config.optimizer, lr=config.lr,
                            weight_decay=config.weight_decay)
        self.bank = memory.MemoryBank(
            capacity=config.bank_capacity,
            rng=np.random.default_rng(
                np.random.SeedSequence([config.seed, 0xBA])),
            sigma_rel=config.sigma_rel, n_segments=config.n_segments,
            evict_direction=config.evict_direction)
        self.protos = None
        self.t = 0
        # everything strictly below the first BN layer is frozen during
        # adaptation and safe to cache per segment; with frozen source
        # statistics the whole conv/BN/depthwise prefix collapses further
        bn_indices = [i for i, _ in net.bn_layers()]
        self.stem_end = bn_indices[0] if bn_indices else 0
        self.sandwich = (FrozenSandwich(net)
                         if FrozenSandwich.applies(net, config.bn_mode)
                         else None)
        self.boundary = (FrozenSandwich.BOUNDARY if self.sandwich
                         else self.stem_end)
        self._stack_key = None
        self._stack = None
        self._sgrad_key = None
        self._sgrad_stack = None

    # ---- frozen-prefix caching ----------------------------------------------

    def _project(self, batch):
        """(stem, ds) caches of a raw segment batch."""
        if self.sandwich is not None:
            return self.sandwich.project(batch)
        x = batch
        for layer in self.net.layers[:self.stem_end]:
            x, _ = layer.forward(x, phase=L.PHASE_EVAL)
        return x, None

    def _ensure_projected(self, items):
        missing = [it for it in items if it.stem is None]
        if missing:
            batch = np.stack([np.asarray(it.segment, dtype=self.net.dtype)
                              for it in missing])
            stems, ds = self._project(batch)
            for i, it in enumerate(missing):
                it.stem = stems[i]
                it.ds = None if ds is None else ds[i]
        key = tuple(id(it) for it in items)
        if key != self._stack_key:
            self._stack_key = key
            source = "ds" if self.sandwich is not None else "stem"
            self._stack = np.stack([getattr(it, source) for it in items])
        return self._stack

    def _head_ready(self, cached_stack):
        """Map a cached projection batch to the boundary-layer input."""
        if self.sandwich is not None:
            return self.sandwich.head_input(cached_stack)
        return cached_stack

    def _grad_stack(self, items, stem_aug=None):
        """Batched first-conv activations for the collapsed BN gradient;
        the bank part is memoized per membership."""
        key = tuple(id(it) for it in items)
        if key != self._sgrad_key:
            self._sgrad_key = key
            self._sgrad_stack = np.stack([it.stem for it in items])
        if stem_aug is None:
            return self._sgrad_stack
        return np.concatenate([self._sgrad_stack, stem_aug])

    def _forward_items(self, items, phase, keep_cache=False):
        stack = self._ensure_projected(items)
        return self.net.forward(self._head_ready(stack), phase=phase,
                                start_layer=self.boundary,
                                keep_cache=keep_cache)

    def _score_model(self, items):
        """Logit rows for scoring under the current parameters.

        With frozen source statistics each sample's logits are independent
        of its batch, so rows stamped fresh by the post-update refresh pass
        are bit-identical to recomputation and are reused; anything else
        (new inserts, other BN modes) is recomputed now.
        """
        if self.config.bn_mode == L.BN_FIXED_SOURCE:
            stale = [it for it in items if not it.logits_fresh
                     or it.cached_logits is None]
            if len(stale) < len(items):
                if stale:
                    logits = self._forward_items(stale, L.PHASE_EVAL).logits
                    computed = {id(it): logits[i]
                                for i, it in enumerate(stale)}
                else:
                    computed = {}
                return np.stack([computed.get(id(it), it.cached_logits)
                                 for it in items])
        return self._forward_items(items, L.PHASE_EVAL).logits

    # ---- one streaming step -------------------------------------------------

    def adapt_step(self, segment):
        """Process one (channels, time) or (1, channels, time) segment."""
        if self.protos is None and self.t > 0:
            raise RuntimeError("adapter state was not initialized at step 1")
        t0 = time.perf_counter()
        cfg = self.config
        x = np.asarray(segment, dtype=self.net.dtype)
        if x.ndim == 2:
            x = x[np.newaxis]
        if x.shape != self.net.input_shape:
            raise ValueError(f"segment shape {x.shape} does not match "
                             f"network input {self.net.input_shape}")
        require_finite(x, "segment")
        self.t += 1
        t = self.t
        step_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, t]))
        diag = {}
        use_bank = cfg.variant != VARIANT_NO_MEM

        stem_x, ds_x = self._project(x[np.newaxis])
        if use_bank:
            if t == 1:
                self.bank.initialize(x)
                self.bank.items[0].stem = stem_x[0]
                self.bank.items[0].ds = None if ds_x is None else ds_x[0]
                # the first insert is already counted by initialization, so
                # scores are computed (for diagnostics) but nothing leaves
                scores = self.bank.scores(t, self._score_model)
                diag["evicted_score"] = None
                diag["max_removal_score"] = float(scores.max())
            else:
                _, score, _ = self.bank.insert_and_evict(
                    x, t, self._score_model, stem=stem_x[0],
                    ds=None if ds_x is None else ds_x[0])
                diag["evicted_score"] = score
        if self.protos is None:
            head = self.net.layers[self.net.head_index]
            self.protos = prototypes.init_from_classifier(
                head.weight, alpha=cfg.alpha, filter_threshold=cfg.m_out,
                filter_direction=cfg.filter_direction)

        if cfg.variant != VARIANT_NO_BN:
            for _ in range(cfg.adaptation_steps_per_sample):
                diag.update(self._objective_step(x, stem_x, ds_x, step_rng))

        uses_protos = cfg.variant in (VARIANT_FULL, VARIANT_NO_BN)
        x_cache = stem_x if ds_x is None else ds_x
        feature = logits = None
        if uses_protos:
            if cfg.bn_mode == L.BN_BATCH_ONLY:
                # test batch of one: the prediction forward must not share
                # batch statistics with the bank refresh
                refresh = self._forward_items(self.bank.items, L.PHASE_EVAL)
            else:
                stack = np.concatenate(
                    [self._ensure_projected(self.bank.items), x_cache])
                joint = self.net.forward(self._head_ready(stack),
                                         phase=L.PHASE_EVAL,
                                         start_layer=self.boundary,
                                         keep_cache=False)
                refresh = ForwardResult(logits=joint.logits[:-1],
                                        features=joint.features[:-1],
                                        caches=None)
                feature = joint.features[-1]
                logits = joint.logits[-1]
            for i, item in enumerate(self.bank.items):
                item.cached_logits = refresh.logits[i]
                item.logits_fresh = True
            self.protos = prototypes.update(self.protos, refresh.features,
                                            refresh.logits)
        if feature is None:
            out = self.net.forward(self._head_ready(x_cache),
                                   phase=L.PHASE_EVAL,
                                   start_layer=self.boundary,
                                   keep_cache=False)
            feature = out.features[0]
            logits = out.logits[0]
        if uses_protos:
            pred, probs = prototypes.predict(feature, self.protos)
            predictor = "prototype"
        else:
            probs = softmax(logits)[0]
            pred = int(logits.argmax())
            predictor = "classifier"
        diag["latency_ms"] = (time.perf_counter() - t0) * 1e3
        return Prediction(step=t, pred=pred, probs=probs, feature=feature,
                          logits=logits, predictor=predictor,
                          diagnostics=diag)

    def _objective_step(self, x, stem_x, ds_x, rng):
        cfg = self.config
        if cfg.variant == VARIANT_NO_MEM:
            originals = [x]
            orig_stack = stem_x if ds_x is None else ds_x
            bank_items = None
            kinds = [memory.AUG_GAUSSIAN if self.t % 2 else
                     memory.AUG_PERMUTATION]
        else:
            originals = [it.segment for it in self.bank.items]
            bank_items = self.bank.items
            orig_stack = self._ensure_projected(bank_items)
            kinds = memory.alternating_kinds(len(originals))
        augmented = np.stack([
            np.asarray(memory.augment(seg, kind, rng,
                                      sigma_rel=cfg.sigma_rel,
                                      n_segments=cfg.n_segments),
                       dtype=self.net.dtype)
            for seg, kind in zip(originals, kinds)])
        stem_aug, ds_aug = self._project(augmented)
        stack = np.concatenate(
            [orig_stack, stem_aug if ds_aug is None else ds_aug])
        res = self.net.forward(self._head_ready(stack), phase=L.PHASE_ADAPT,
                               start_layer=self.boundary)
        n = len(originals)
        value, g_mem, g_aug, parts = total_loss(
            res.logits[:n], res.logits[n:], self.weights)
        dlogits = np.concatenate([g_mem, g_aug])
        if self.sandwich is not None:
            grads, dy = self.net.backward_partial(
                res.caches, dlogits, SCOPE_BN_AFFINE,
                stop_layer=self.boundary)
            if bank_items is not None:
                s_all = self._grad_stack(bank_items, stem_aug)
            else:
                s_all = np.concatenate([stem_x, stem_aug])
            dgamma, dbeta = self.sandwich.bn_gradients(s_all, dy)
            grads.by_key[(1, "gamma")] = dgamma
            grads.by_key[(1, "beta")] = dbeta
        else:
            grads = self.net.backward(res.caches, dlogits, SCOPE_BN_AFFINE)
        optimizer_step(self.net, grads, self.opt)
        return {"loss_total": value, "loss_entropy": parts["entropy"],
                "loss_energy": parts["energy"]}


def init_adapter(net, config=None):
    return AdapterState(net, config or AdaptConfig())


def run_stream(state, stream, keep_features=False):
    """One prediction per segment, in order; wall-clock per step.

    Stream elements may be SegmentRecords (labels carried into the log) or
    raw arrays.
    """
    stream = list(stream)
    if not stream:
        raise ValueError("empty stream")
    log = []
    for element in stream:
        if hasattr(element, "segment"):
            segment = element.segment
            label = None if element.label < 0 else int(element.label)
        else:
            segment, label = element, None
        p = state.adapt_step(segment)
        d = p.diagnostics
        log.append(LogEntry(
            step=p.step, true_label=label, pred=p.pred,
            probs=[float(v) for v in p.probs], predictor=p.predictor,
            latency_ms=d.get("latency_ms", 0.0),
            loss_total=d.get("loss_total"),
            loss_entropy=d.get("loss_entropy"),
            loss_energy=d.get("loss_energy"),
            evicted_score=d.get("evicted_score"),
            feature=[float(v) for v in p.feature] if keep_features else None))
    return log


def write_prediction_log(log, path):
    with open(path, "w", encoding="utf-8") as f:
        for entry in log:
            row = asdict(entry)
            if row.get("feature") is None:
                row.pop("feature", None)
            f.write(json.dumps(row) + "\n")


def read_prediction_log(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(LogEntry(**json.loads(line)))
    return out
