"""Downstream adaptation and evaluation.

Linear probing, two-step (frozen then unfrozen) fine-tuning, LoRA on the
attention projections, mixup, reduce-on-plateau, weight souping, NCM
few-shot, Euclidean alignment, channel-subset evaluation and metrics.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from sklearn import metrics as skm
from sklearn.linear_model import LogisticRegression, LogisticRegressionCV
from sklearn.model_selection import StratifiedKFold
from sklearn.pipeline import Pipeline, make_pipeline
from sklearn.preprocessing import StandardScaler
from torch import nn
from torch.nn import functional as F

from .eeg_data import EegRecording
from .model import Attention
from .optim import StableAdamW, param_groups, set_lr
from .patching import PatchConfig, unfold
from .pretrain import REVE, AttentionPool

UNDEFINED = None  # marker for metrics that do not exist for the given labels


# --------------------------------------------------------------------------
# metrics


def classification_metrics(y_true, y_pred, scores=None) -> dict:
    """Balanced accuracy, Cohen's kappa, weighted F1; AUROC / AUC-PR for
    binary tasks when positive-class ``scores`` are given."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    single = np.unique(y_true).size < 2
    out = {
        "balanced_accuracy": float(skm.balanced_accuracy_score(y_true, y_pred)),
        "cohen_kappa": UNDEFINED if single else float(skm.cohen_kappa_score(y_true, y_pred)),
        "weighted_f1": float(skm.f1_score(y_true, y_pred, average="weighted", zero_division=0)),
    }
    if scores is not None:
        binary = np.unique(y_true).size == 2
        out["auroc"] = float(skm.roc_auc_score(y_true, scores)) if binary else UNDEFINED
        out["auc_pr"] = float(skm.average_precision_score(y_true, scores, pos_label=np.max(y_true))) if binary else UNDEFINED
    return out


def checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# data


@dataclass
class LabeledSet:
    patches: torch.Tensor  # N, C, p, w
    positions: torch.Tensor  # N, C, 3
    labels: torch.Tensor  # N

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_recordings(cls, recs: Sequence[EegRecording], patch: PatchConfig, dtype=torch.float32) -> "LabeledSet":
        if len({r.n_channels for r in recs}) != 1 or len({r.n_samples for r in recs}) != 1:
            raise ValueError("recordings in a LabeledSet must share channel count and length")
        x = np.stack([unfold(np.asarray(r.data, dtype=np.float64), patch) for r in recs])
        pos = np.stack([r.channel_positions() for r in recs])
        return cls(
            torch.as_tensor(x, dtype=dtype),
            torch.as_tensor(pos, dtype=dtype),
            torch.as_tensor([r.label for r in recs], dtype=torch.long),
        )

    def subset(self, idx) -> "LabeledSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return LabeledSet(self.patches[idx], self.positions[idx], self.labels[idx])

    def select_channels(self, idx) -> "LabeledSet":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return LabeledSet(self.patches[:, idx], self.positions[:, idx], self.labels)


@torch.no_grad()
def embed_dataset(model: REVE, data: LabeledSet, pooling: str = "mean", batch_size: int = 64) -> np.ndarray:
    """Frozen features, one row per sample.

    ``mean`` averages final tokens, ``layer-mean`` concatenates the token
    average of every encoder block, ``attention`` is the pretrained pooling
    head, ``none-flatten`` keeps all final tokens.
    """
    model.eval()
    feats = []
    for i in range(0, len(data), batch_size):
        x, pos = data.patches[i : i + batch_size], data.positions[i : i + batch_size]
        final, record = model.encode_all(x, pos)
        if pooling == "mean":
            feats.append(final.mean(1))
        elif pooling == "layer-mean":
            feats.append(torch.cat([r.mean(1) for r in record], -1) if record else final.mean(1))
        elif pooling == "attention":
            feats.append(model.attention_pool(record) if record else final.mean(1))
        elif pooling in ("none", "flatten", "none-flatten"):
            feats.append(final.flatten(1))
        else:
            raise ValueError(f"unknown pooling {pooling!r}")
    return torch.cat(feats).cpu().numpy()


# --------------------------------------------------------------------------
# linear probing


@dataclass
class ProbeConfig:
    pooling: str = "layer-mean"  # mean | layer-mean | attention | none-flatten
    classes: int = 2
    n_c: int = 10  # inverse-regularization grid size, searched by inner CV
    folds: int = 3
    max_iter: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("a probe needs at least 2 classes")
        if self.n_c < 1 or self.folds < 2:
            raise ValueError("need n_c >= 1 and folds >= 2")


@dataclass
class ProbeResult:
    estimator: Pipeline
    metrics: dict

    def predict_logits(self, feats: np.ndarray) -> np.ndarray:
        return self.estimator.decision_function(np.asarray(feats).reshape(len(feats), -1))

    def predict_scores(self, feats: np.ndarray) -> np.ndarray:
        return self.estimator.predict_proba(np.asarray(feats).reshape(len(feats), -1))


def linear_probe(train_x, train_y, test_x=None, test_y=None, cfg: ProbeConfig | None = None) -> ProbeResult:
    """L2 logistic regression on standardized frozen features, with the
    regularization strength picked by stratified inner cross-validation."""
    cfg = cfg or ProbeConfig()
    train_x = np.asarray(train_x, dtype=np.float64).reshape(len(train_x), -1)
    train_y = np.asarray(train_y)
    classes, counts = np.unique(train_y, return_counts=True)
    if classes.size < 2:
        raise ValueError("linear probing needs at least two classes in the training labels")
    folds = StratifiedKFold(min(cfg.folds, int(counts.min())), shuffle=True, random_state=cfg.seed) if counts.min() >= 2 else None
    est = make_pipeline(
        StandardScaler(),
        LogisticRegressionCV(Cs=cfg.n_c, cv=folds, max_iter=cfg.max_iter, scoring="balanced_accuracy")
        if folds is not None else LogisticRegression(max_iter=cfg.max_iter),
    )
    est.fit(train_x, train_y)
    result = ProbeResult(est, {})
    eval_x, eval_y = (train_x, train_y) if test_x is None else (np.asarray(test_x).reshape(len(test_x), -1), np.asarray(test_y))
    pred = est.predict(eval_x)
    # rank by decision margin: probabilities saturate to exact 0/1 and create ties
    margin = est.decision_function(eval_x) if classes.size == 2 else None
    result.metrics = classification_metrics(eval_y, pred, margin)
    return result


def probe_model(model: REVE, train: LabeledSet, test: LabeledSet, cfg: ProbeConfig | None = None) -> ProbeResult:
    """Embed with the frozen encoder and probe; asserts the encoder is untouched."""
    cfg = cfg or ProbeConfig()
    before = checksum(model)
    res = linear_probe(
        embed_dataset(model, train, cfg.pooling), train.labels.numpy(),
        embed_dataset(model, test, cfg.pooling), test.labels.numpy(), cfg,
    )
    if checksum(model) != before:
        raise RuntimeError("encoder parameters changed during probing")
    res.metrics["encoder_checksum"] = before
    return res


# --------------------------------------------------------------------------
# LoRA


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("q", "k", "v", "o")

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")


class LoRALinear(nn.Module):
    """Frozen base Linear plus (alpha/rank) * B A, with B = 0 at creation."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, generator: torch.Generator | None = None):
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank >= min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} must be < layer width {min(d_in, d_out)}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank, self.scaling = rank, alpha / rank
        dtype = base.weight.dtype
        self.lora_A = nn.Parameter(torch.empty(rank, d_in, dtype=dtype).normal_(0.0, 0.02, generator=generator))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=dtype))

    def forward(self, x):
        return self.base(x) + (x @ self.lora_A.T @ self.lora_B.T) * self.scaling

    def merged(self) -> nn.Linear:
        lin = nn.Linear(self.base.in_features, self.base.out_features, bias=self.base.bias is not None)
        lin = lin.to(self.base.weight.dtype)
        with torch.no_grad():
            lin.weight.copy_(self.base.weight + self.scaling * (self.lora_B @ self.lora_A))
            if self.base.bias is not None:
                lin.bias.copy_(self.base.bias)
        return lin


def lora_inject(model: nn.Module, cfg: LoraConfig | None = None, seed: int = 0) -> list[str]:
    """Wrap the target projections of every Attention block in place."""
    cfg = cfg or LoraConfig()
    gen = torch.Generator().manual_seed(seed)
    wrapped = []
    for name, mod in model.named_modules():
        if isinstance(mod, Attention):
            for t in cfg.targets:
                base = getattr(mod, t)
                if not isinstance(base, nn.Linear):
                    raise ValueError(f"{name}.{t} is not a plain Linear (already adapted?)")
                setattr(mod, t, LoRALinear(base, cfg.rank, cfg.alpha, gen))
                wrapped.append(f"{name}.{t}")
    if not wrapped:
        raise ValueError("no attention projections found to adapt")
    return wrapped


def lora_merge(model: nn.Module) -> int:
    """Fold every adapter into its base weight and drop the adapter."""
    n = 0
    for mod in list(model.modules()):
        if isinstance(mod, Attention):
            for t in ("q", "k", "v", "o"):
                sub = getattr(mod, t)
                if isinstance(sub, LoRALinear):
                    setattr(mod, t, sub.merged())
                    n += 1
    return n


def lora_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for n, p in model.named_parameters() if "lora_" in n]


# --------------------------------------------------------------------------
# mixup, plateau, soup


def mixup_batch(x, y_onehot, alpha: float = 0.2, rng: np.random.Generator | None = None, lam: float | None = None):
    """Convex combination of a batch with a permutation of itself.

    Returns (mixed x, mixed targets, lambda).
    """
    if alpha <= 0:
        raise ValueError("mixup alpha must be > 0")
    rng = rng or np.random.default_rng()
    lam = float(rng.beta(alpha, alpha)) if lam is None else float(lam)
    perm = torch.as_tensor(rng.permutation(len(x)), dtype=torch.long)
    return lam * x + (1 - lam) * x[perm], lam * y_onehot + (1 - lam) * y_onehot[perm], lam


class ReduceOnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` evaluations
    in a row without a new best loss."""

    def __init__(self, lr: float, patience: int = 3, factor: float = 0.5, min_lr: float = 0.0):
        self.lr, self.patience, self.factor, self.min_lr = lr, patience, factor, min_lr
        self.best = math.inf
        self.bad = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best, self.bad = loss, 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.min_lr, self.lr * self.factor)
                self.bad = 0
        return self.lr


class SoupMismatch(ValueError):
    pass


def soup(state_dicts: Sequence[dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    """Uniform soup: elementwise mean of every tensor."""
    if not state_dicts:
        raise SoupMismatch("nothing to average")
    ref = state_dicts[0]
    for sd in state_dicts[1:]:
        if list(sd) != list(ref) or any(sd[k].shape != ref[k].shape for k in ref):
            raise SoupMismatch("checkpoints differ in tensor names or shapes")
    out = {}
    for k, t in ref.items():
        stacked = torch.stack([sd[k].to(torch.float64) for sd in state_dicts])
        out[k] = stacked.mean(0).to(t.dtype)
    return out


# --------------------------------------------------------------------------
# few-shot, alignment


def ncm_few_shot(embeddings, labels, n_shots: int, n_runs: int = 20, seed: int = 0) -> dict:
    """Nearest-class-mean classification from ``n_shots`` samples per class.

    Each run draws the shots at random and classifies every remaining sample
    by Euclidean distance to the class centroids.
    """
    X, y = np.asarray(embeddings, dtype=np.float64).reshape(len(embeddings), -1), np.asarray(labels)
    classes = np.unique(y)
    for c in classes:
        if (y == c).sum() <= n_shots:
            raise ValueError(f"class {c} has {(y == c).sum()} samples; need more than n_shots={n_shots}")
    rng = np.random.default_rng(seed)
    accs = []
    for _ in range(n_runs):
        train = np.concatenate([rng.choice(np.flatnonzero(y == c), n_shots, replace=False) for c in classes])
        test = np.setdiff1d(np.arange(len(y)), train)
        centroids = np.stack([X[train][y[train] == c].mean(0) for c in classes])
        d = ((X[test][:, None, :] - centroids[None]) ** 2).sum(-1)
        accs.append(skm.balanced_accuracy_score(y[test], classes[d.argmin(1)]))
    return {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "runs": accs}


def euclidean_alignment(trials: Sequence[np.ndarray], ridge: float = 1e-8) -> list[np.ndarray]:
    """Whiten one subject's trials by the inverse square root of their mean covariance.

    The ridge is relative to the mean eigenvalue so scaling all trials by a
    constant leaves the aligned output unchanged.
    """
    if not trials:
        raise ValueError("need at least one trial")
    R = np.mean([X @ X.T / X.shape[1] for X in map(np.asarray, trials)], axis=0)
    C = R.shape[0]
    R = R + ridge * np.trace(R) / C * np.eye(C)
    evals, evecs = np.linalg.eigh(R)
    if evals.min() <= 0 or not np.all(np.isfinite(evals)):
        raise np.linalg.LinAlgError("average covariance is singular even after the ridge")
    R_isqrt = (evecs / np.sqrt(evals)) @ evecs.T
    return [R_isqrt @ np.asarray(X) for X in trials]


def align_by_subject(recs: Sequence[EegRecording], ridge: float = 1e-8) -> list[EegRecording]:
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(recs):
        groups.setdefault(r.subject_id, []).append(i)
    out: list[EegRecording | None] = [None] * len(recs)
    for idx in groups.values():
        for i, X in zip(idx, euclidean_alignment([recs[i].data for i in idx], ridge)):
            out[i] = recs[i].with_data(X)
    return out


# --------------------------------------------------------------------------
# fine-tuning


class Classifier(nn.Module):
    """Pretrained encoder + pooling + linear head."""

    def __init__(self, backbone: REVE, n_classes: int, pooling: str = "attention", dropout: float = 0.0, n_tokens: int | None = None):
        super().__init__()
        self.backbone = backbone
        self.pooling = pooling
        D = backbone.cfg.dim
        self.pool = copy.deepcopy(backbone.pool) if pooling == "attention" else None
        if pooling in ("none", "flatten", "none-flatten"):
            if n_tokens is None:
                raise ValueError("flatten pooling needs n_tokens")
            in_dim = n_tokens * D
        else:
            in_dim = D
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(in_dim, n_classes)

    def backbone_modules(self) -> list[nn.Module]:
        b = self.backbone
        return [b.patch_embed, b.posenc, b.encoder]

    def features(self, patches, positions):
        final, _ = self.backbone.encode_all(patches, positions)
        if self.pooling == "attention":
            return self.pool(final)
        if self.pooling == "mean":
            return final.mean(1)
        return final.flatten(1)

    def forward(self, patches, positions):
        return self.head(self.dropout(self.features(patches, positions)))


@dataclass
class FinetunePlan:
    total_steps: int = 200
    freeze_steps: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 10
    weight_decay: float = 0.01
    mixup_alpha: float = 0.2
    use_mixup: bool = True
    dropout: float = 0.1
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    eval_every: int = 10
    pooling: str = "attention"
    lora: LoraConfig | None = None
    lora_during_freeze: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.freeze_steps <= self.total_steps:
            raise ValueError("need 0 <= freeze_steps <= total_steps")


@dataclass
class FinetuneResult:
    model: Classifier
    history: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


def _backbone_params(clf: Classifier) -> list[tuple[str, nn.Parameter]]:
    out = []
    for mod in clf.backbone_modules():
        for n, p in mod.named_parameters():
            if "lora_" not in n and not (".base." in n or n.endswith(("base.weight", "base.bias"))):
                out.append((n, p))
    return out


@torch.no_grad()
def evaluate(clf: Classifier, data: LabeledSet, batch_size: int = 64) -> tuple[float, dict]:
    clf.eval()
    logits = torch.cat([
        clf(data.patches[i : i + batch_size], data.positions[i : i + batch_size]) for i in range(0, len(data), batch_size)
    ])
    loss = F.cross_entropy(logits, data.labels).item()
    probs = torch.softmax(logits, -1).numpy()
    scores = probs[:, 1] if probs.shape[1] == 2 else None
    return loss, classification_metrics(data.labels.numpy(), probs.argmax(1), scores)


def two_step_finetune(model: REVE, train: LabeledSet, val: LabeledSet, plan: FinetunePlan | None = None, n_classes: int | None = None) -> FinetuneResult:
    """Head-only training for ``freeze_steps``, then the backbone joins, in one run.

    The learning rate warms up linearly, then follows reduce-on-plateau on
    the validation loss. Every step records the backbone gradient norm.
    """
    plan = plan or FinetunePlan()
    n_classes = n_classes or int(train.labels.max().item()) + 1
    backbone = copy.deepcopy(model)
    if plan.lora is not None:
        lora_inject(backbone.encoder, plan.lora, seed=plan.seed)
    C, p = train.patches.shape[1:3]
    clf = Classifier(backbone, n_classes, plan.pooling, plan.dropout, n_tokens=C * p)
    clf = clf.to(next(model.parameters()).dtype)

    backbone_params = _backbone_params(clf)
    adapters = lora_parameters(clf)
    for _, prm in backbone_params:
        prm.requires_grad_(False)
    for prm in adapters:
        prm.requires_grad_(plan.lora_during_freeze)
    opt = StableAdamW(param_groups(clf, plan.weight_decay), lr=0.0, clip_threshold=1.0)
    # frozen params are absent from the groups above; add them now so their
    # state exists once they start receiving gradients
    seen = {id(q) for g in opt.param_groups for q in g["params"]}
    late = [prm for _, prm in backbone_params if id(prm) not in seen] + [q for q in adapters if id(q) not in seen]
    for decays in (True, False):
        group = [q for q in late if (q.ndim >= 2) == decays]
        if group:
            opt.add_param_group({"params": group, "weight_decay": plan.weight_decay if decays else 0.0})

    plateau = ReduceOnPlateau(plan.lr, plan.plateau_patience, plan.plateau_factor)
    result = FinetuneResult(clf)
    lr = 0.0
    for step in range(plan.total_steps):
        if step == plan.freeze_steps:
            for _, prm in backbone_params:
                prm.requires_grad_(True)
            for prm in adapters:
                prm.requires_grad_(True)
        lr = plan.lr * min(1.0, (step + 1) / max(1, plan.warmup_steps)) if step < plan.warmup_steps else plateau.lr
        set_lr(opt, lr)
        rng = np.random.default_rng([plan.seed, step])
        idx = rng.choice(len(train), size=min(plan.batch_size, len(train)), replace=False)
        x, pos, y = train.patches[idx], train.positions[idx], train.labels[idx]
        target = F.one_hot(y, n_classes).to(x.dtype)
        if plan.use_mixup:
            x, target, _ = mixup_batch(x, target, plan.mixup_alpha, rng)
        clf.train()
        opt.zero_grad(set_to_none=True)
        logits = clf(x, pos)
        loss = torch.sum(-target * F.log_softmax(logits, -1), -1).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(f"fine-tuning diverged at step {step}")
        loss.backward()
        bb = [prm.grad.flatten() for _, prm in backbone_params if prm.grad is not None]
        bb_norm = torch.cat(bb).norm().item() if bb else 0.0
        opt.step()
        entry = {"step": step, "lr": lr, "loss": loss.item(), "backbone_grad_norm": bb_norm}
        if (step + 1) % plan.eval_every == 0 and len(val):
            vloss, _ = evaluate(clf, val)
            entry["val_loss"] = vloss
            if step >= plan.warmup_steps:
                plateau.step(vloss)
        result.history.append(entry)
    _, result.metrics = evaluate(clf, val)
    return result


# --------------------------------------------------------------------------
# channel subsets


def channel_subset_eval(
    model: REVE,
    train: Sequence[EegRecording],
    test: Sequence[EegRecording],
    keep: Sequence[str],
    patch: PatchConfig | None = None,
    probe: ProbeConfig | None = None,
) -> dict:
    """Probe accuracy using only the ``keep`` channels (true positions kept)."""
    if not keep:
        raise ValueError("channel subset must not be empty")
    patch = patch or PatchConfig(model.cfg.patch_size, model.cfg.patch_size // 10)
    dtype = next(model.parameters()).dtype
    tr = LabeledSet.from_recordings([r.select(keep) for r in train], patch, dtype)
    te = LabeledSet.from_recordings([r.select(keep) for r in test], patch, dtype)
    probe = probe or ProbeConfig(classes=int(tr.labels.max()) + 1)
    res = probe_model(model, tr, te, probe)
    res.metrics["n_tokens"] = int(tr.patches.shape[1] * tr.patches.shape[2])
    return res.metrics
