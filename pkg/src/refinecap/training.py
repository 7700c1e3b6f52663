"""Tag pretraining, teacher-forced MLE and REINFORCE fine-tuning.

Every random choice (batch order, reference choice, rollouts, dropout) is
drawn from generators seeded by the run seed, so two runs with the same
configuration produce byte-identical curves and checkpoints.
"""

from __future__ import annotations

import csv
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .decoding import greedy_decode
from .metrics import CorpusIdf, bleu, cider_d
from .model import Captioner
from .optim import Adam
from .tensor import ContractError, Tensor
from .toyworld import END_ID, PAD_ID, START_ID, Dataset, SceneRecord, VocabPair

log = logging.getLogger(__name__)

PHASES = ("tag", "mle", "rl")
CURVE_HEADER = ("epoch", "phase", "val_cider", "val_bleu1", "val_bleu4", "val_loss", "mean_reward", "baseline")


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Scenes plus teacher-forcing arrays.

    ``tokens_in`` is ``[START] + ref`` and ``targets`` is ``ref + [END]``,
    both right-padded with PAD to the longest row; ``target_mask`` marks the
    real target positions.
    """

    X: np.ndarray
    mask: np.ndarray
    tokens_in: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    references: list[list[list[str]]]
    tag_labels: np.ndarray | None = None
    scene_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.X)


def frame_sequences(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing inputs, targets and target mask for id sequences."""
    L = max(len(s) for s in seqs) + 1
    B = len(seqs)
    tokens_in = np.full((B, L), PAD_ID, dtype=np.int64)
    targets = np.full((B, L), PAD_ID, dtype=np.int64)
    target_mask = np.zeros((B, L), dtype=bool)
    for i, s in enumerate(seqs):
        tokens_in[i, 0] = START_ID
        tokens_in[i, 1 : len(s) + 1] = s
        targets[i, : len(s)] = s
        targets[i, len(s)] = END_ID
        target_mask[i, : len(s) + 1] = True
    return tokens_in, targets, target_mask


def make_batch(
    records: Sequence[SceneRecord], captions: Sequence[Sequence[str]], vocab: VocabPair
) -> Batch:
    X = np.stack([r.features for r in records])
    mask = np.zeros(X.shape[:2], dtype=bool)
    for i, r in enumerate(records):
        mask[i, : r.valid_count] = True
    tokens_in, targets, target_mask = frame_sequences([vocab.encode(c) for c in captions])
    labels = None
    if all(r.tag_labels is not None for r in records):
        labels = np.stack([r.tag_labels for r in records])
    return Batch(
        X, mask, tokens_in, targets, target_mask, [r.references for r in records], labels, [r.scene_id for r in records]
    )


def epoch_batches(
    records: Sequence[SceneRecord],
    vocab: VocabPair,
    batch_size: int,
    rng: np.random.Generator,
    expand_references: bool = False,
) -> list[Batch]:
    """Shuffle and cut one epoch into batches.

    By default each scene contributes one uniformly chosen reference;
    ``expand_references`` instead pairs the scene with all of them.
    """
    if expand_references:
        pairs = [(r, ref) for r in records for ref in r.references]
    else:
        pairs = [(r, r.references[int(rng.integers(len(r.references)))]) for r in records]
    order = rng.permutation(len(pairs))
    out = []
    for start in range(0, len(pairs), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        out.append(make_batch([p[0] for p in chunk], [p[1] for p in chunk], vocab))
    return out


# --------------------------------------------------------------------------
# losses and single steps


def sequence_nll(model: Captioner, batch: Batch) -> Tensor:
    """Mean negative log-probability over real target positions."""
    n = int(batch.target_mask.sum())
    if n == 0:
        raise ContractError("batch holds no target tokens")
    logp = model.forward(batch.tokens_in, batch.X, batch.mask)
    picked = T.take(logp, batch.targets)
    weights = T.constant(batch.target_mask.astype(model.dtype) / -n, dtype=model.dtype)
    return T.tsum(picked * weights)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of ``softplus(v) - y v``, which equals mean BCE(sigmoid(v), y)."""
    y = T.constant(np.asarray(labels, dtype=logits.dtype), dtype=logits.dtype)
    return T.tmean(T.softplus(logits) - logits * y)


def tag_loss(model: Captioner, batch: Batch) -> Tensor:
    if batch.tag_labels is None:
        raise ContractError("tag pretraining needs tag labels")
    if not model.cfg.refinement_enabled:
        raise ContractError("tag pretraining needs the concept layer (refinement enabled)")
    F = model.encode(model.project_features(batch.X, batch.mask), batch.mask)
    return bce_with_logits(model.concept_logits(F, batch.mask), batch.tag_labels)


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss ({value}) {where}")


def mle_step(model: Captioner, opt: Adam, batch: Batch) -> float:
    opt.zero_grad()
    loss = sequence_nll(model, batch)
    _check_finite(loss.item(), "in MLE step")
    T.backward(loss)
    opt.step()
    return loss.item()


def tag_pretrain_step(model: Captioner, opt: Adam, batch: Batch) -> float:
    opt.zero_grad()
    loss = tag_loss(model, batch)
    _check_finite(loss.item(), "in tag step")
    T.backward(loss)
    opt.step()
    return loss.item()


# --------------------------------------------------------------------------
# rollouts and REINFORCE


@dataclass
class RolloutBatch:
    """Sampled actions per scene.

    ``actions[i]`` ends with END unless the rollout hit ``max_len`` words, in
    which case the end is forced and carries no log-probability.
    """

    actions: list[list[int]]
    log_probs: list[np.ndarray]
    returns: np.ndarray | None = None
    baseline: float | None = None

    def words(self, i: int) -> list[int]:
        a = self.actions[i]
        return a[:-1] if a and a[-1] == END_ID else list(a)


def sample_rollout(
    model: Captioner, X: np.ndarray, mask: np.ndarray, max_len: int, rng: np.random.Generator
) -> RolloutBatch:
    """Ancestral sampling from the refined next-word distribution."""
    enc = model.prepare(X, mask)
    B = len(X)
    actions: list[list[int]] = [[] for _ in range(B)]
    logps: list[list[float]] = [[] for _ in range(B)]
    active = list(range(B))
    for _ in range(max_len):
        if not active:
            break
        prefixes = np.array([[START_ID] + actions[b] for b in active], dtype=np.int64)
        lp = model.next_log_probs(enc, prefixes, np.array(active))
        probs = np.exp(lp.astype(np.float64))
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(len(active)) * cdf[:, -1]
        picks = np.minimum((cdf <= u[:, None]).sum(axis=1), lp.shape[1] - 1)
        still = []
        for b, tok, row in zip(active, picks.tolist(), lp):
            actions[b].append(tok)
            logps[b].append(float(row[tok]))
            if tok != END_ID:
                still.append(b)
        active = still
    return RolloutBatch(actions, [np.array(x) for x in logps])


def rollout_log_prob_sums(model: Captioner, X: np.ndarray, mask: np.ndarray, rollout: RolloutBatch) -> Tensor:
    """Differentiable ``sum_t log pi(a_t)`` per rollout, shape (B,)."""
    seqs = rollout.actions
    L = max(max(len(a) for a in seqs), 1)
    B = len(seqs)
    tokens_in = np.full((B, L), PAD_ID, dtype=np.int64)
    targets = np.full((B, L), PAD_ID, dtype=np.int64)
    steps = np.zeros((B, L), dtype=model.dtype)
    for i, a in enumerate(seqs):
        tokens_in[i, 0] = START_ID
        tokens_in[i, 1 : len(a)] = a[:-1]
        targets[i, : len(a)] = a
        steps[i, : len(a)] = 1.0
    logp = model.forward(tokens_in, X, mask)
    picked = T.take(logp, targets) * T.constant(steps, dtype=model.dtype)
    return T.tsum(picked, axis=1)


def reinforce_loss(log_prob_sums: Tensor, returns: np.ndarray) -> tuple[Tensor, float]:
    """Surrogate ``-(1/B) sum_i (G_i - b) sum_t log pi`` with ``b = mean(G)``."""
    returns = np.asarray(returns, dtype=np.float64)
    b = float(returns.mean())
    adv = T.constant((returns - b) / -len(returns), dtype=log_prob_sums.dtype)
    return T.tsum(log_prob_sums * adv), b


@dataclass
class RewardStats:
    mean_return: float
    baseline: float
    loss: float
    returns: np.ndarray


def rollout_returns(rollout: RolloutBatch, references, vocab: VocabPair, idf: CorpusIdf) -> np.ndarray:
    cands = [vocab.decode(rollout.words(i)) for i in range(len(rollout.actions))]
    return np.array(cider_d(cands, references, idf))


def reinforce_step(
    model: Captioner, opt: Adam, batch: Batch, idf: CorpusIdf, rng: np.random.Generator, vocab: VocabPair
) -> RewardStats:
    """Sample one rollout per scene, score it and take one policy-gradient step.

    The model runs without dropout here, so sampling and the recomputed
    log-probabilities see the same policy.
    """
    was_training = model.training
    model.eval()
    try:
        rollout = sample_rollout(model, batch.X, batch.mask, model.cfg.T_max, rng)
        G = rollout_returns(rollout, batch.references, vocab, idf)
        if len(G) == 1:
            log.warning("batch of one rollout: baseline equals the return, gradient is zero")
        elif np.all(G == G[0]):
            log.info("all returns equal in this batch: zero policy gradient")
        opt.zero_grad()
        loss, b = reinforce_loss(rollout_log_prob_sums(model, batch.X, batch.mask, rollout), G)
        _check_finite(loss.item(), "in REINFORCE step")
        T.backward(loss)
        opt.step()
    finally:
        model.train(was_training)
    rollout.returns, rollout.baseline = G, b
    return RewardStats(float(G.mean()), b, loss.item(), G)


def per_sample_score_grads(model: Captioner, X: np.ndarray, mask: np.ndarray, rollout: RolloutBatch) -> np.ndarray:
    """Flattened gradient of ``sum_t log pi(a_t)`` for each rollout, shape (B, P)."""
    params = model.parameters()
    rows = []
    for i in range(len(rollout.actions)):
        sub = RolloutBatch([rollout.actions[i]], [rollout.log_probs[i]])
        for p in params:
            p.grad = None
        s = T.tsum(rollout_log_prob_sums(model, X[i : i + 1], mask[i : i + 1], sub))
        T.backward(s)
        rows.append(np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params]))
    for p in params:
        p.grad = None
    return np.stack(rows).astype(np.float64)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class ValScores:
    cider: float
    bleu1: float
    bleu4: float
    loss: float


def greedy_captions(model: Captioner, records: Sequence[SceneRecord], vocab: VocabPair, batch_size: int = 64):
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            b = make_batch(chunk, [[] for _ in chunk], vocab)
            out.extend(vocab.decode(s) for s in greedy_decode(model, b.X, b.mask, model.cfg.T_max))
    finally:
        model.train(was_training)
    return out


def validation_loss(model: Captioner, records: Sequence[SceneRecord], vocab: VocabPair, phase: str) -> float:
    """Teacher-forced NLL over every reference, or tag BCE for the tag phase."""
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            if phase == "tag":
                b = make_batch(records, [[] for _ in records], vocab)
                return tag_loss(model, b).item()
            pairs = [(r, ref) for r in records for ref in r.references]
            b = make_batch([p[0] for p in pairs], [p[1] for p in pairs], vocab)
            return sequence_nll(model, b).item()
    finally:
        model.train(was_training)


def validate(model: Captioner, records: Sequence[SceneRecord], vocab: VocabPair, phase: str) -> ValScores:
    refs = [r.references for r in records]
    caps = greedy_captions(model, records, vocab)
    scores = cider_d(caps, refs)
    bl = bleu(caps, refs).corpus
    return ValScores(float(np.mean(scores)), bl[0], bl[3], validation_loss(model, records, vocab, phase))


# --------------------------------------------------------------------------
# curve log


@dataclass
class CurveRow:
    epoch: int
    phase: str
    val_cider: float
    val_bleu1: float
    val_bleu4: float
    val_loss: float
    mean_reward: float | None = None
    baseline: float | None = None

    def cells(self) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.epoch),
            self.phase,
            fmt(self.val_cider),
            fmt(self.val_bleu1),
            fmt(self.val_bleu4),
            fmt(self.val_loss),
            fmt(self.mean_reward),
            fmt(self.baseline),
        ]


class CurveLog:
    """Per-epoch rows, written through to CSV as they arrive."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[CurveRow] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(CURVE_HEADER)

    def append(self, row: CurveRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ContractError("curve epochs must strictly increase")
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row.cells())

    @staticmethod
    def read(path: str | Path) -> list[dict[str, str]]:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# the full schedule


@dataclass
class PhaseResult:
    phase: str
    epochs_run: int
    best_cider: float
    best_epoch: int | None
    stopped_early: bool
    checkpoint: Path | None


@dataclass
class FitResult:
    curve: CurveLog
    phases: list[PhaseResult]
    best_cider: float
    best_checkpoint: Path | None
    reward_history: list[list[float]] = field(default_factory=list)


class EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch: int | None = None
        self.bad = 0

    def update(self, score: float, epoch: int) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if score > self.best:
            self.best, self.best_epoch, self.bad = score, epoch, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


def train_idf(dataset: Dataset) -> CorpusIdf:
    return CorpusIdf(r.references for r in dataset.split("train"))


def fit(
    model: Captioner,
    dataset: Dataset,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    phases: Sequence[str] = PHASES,
    on_epoch: Callable[[CurveRow], None] | None = None,
    checkpoint_meta: dict | None = None,
) -> FitResult:
    """Run the enabled phases in order: tag, MLE, RL.

    Tag pretraining runs ``tag_pretrain_epochs`` epochs without early
    stopping; MLE and RL stop after ``patience`` epochs without a gain in
    greedy validation CIDEr-D.  RL starts from the best MLE weights.  With
    ``out_dir`` set, ``curve.csv`` and ``<phase>.rfcp`` best-of-phase
    checkpoints are written there, plus ``best.rfcp`` for the best MLE/RL
    weights overall.  ``checkpoint_meta`` is merged into every checkpoint's
    JSON sidecar.
    """
    tc = cfg.train
    meta = dict(checkpoint_meta or {})
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curve = CurveLog(out / "curve.csv" if out is not None else None)
    train, val = dataset.split("train"), dataset.split("val")
    if not train or not val:
        raise ContractError("fit needs non-empty train and val splits")
    vocab = dataset.vocab
    idf = train_idf(dataset)
    lengths = {"tag": tc.tag_pretrain_epochs, "mle": tc.mle_epochs, "rl": tc.rl_epochs}
    rates = {"tag": tc.lr_tag, "mle": tc.lr_mle, "rl": tc.lr_rl}
    epoch = 0
    results: list[PhaseResult] = []
    best_overall, best_path = -math.inf, None
    best_states: dict[str, dict] = {}
    rewards: list[list[float]] = []

    for phase_no, phase in enumerate(PHASES):
        if phase not in phases or lengths[phase] == 0:
            continue
        if phase == "tag" and not model.cfg.refinement_enabled:
            log.warning("tag pretraining skipped: refinement disabled")
            continue
        if phase == "rl" and "mle" in best_states:
            model.load_state_dict(best_states["mle"])
        params = model.parameters("tag" if phase == "tag" else "all")
        opt = Adam(params, lr=rates[phase], betas=(tc.beta1, tc.beta2), eps=tc.eps)
        batch_rng = np.random.default_rng([cfg.seed, 3, phase_no])
        sample_rng = np.random.default_rng([cfg.seed, 4, phase_no])
        stopper = EarlyStopper(tc.patience)
        stopped = False
        ckpt = out / f"{phase}.rfcp" if out is not None else None
        run = 0
        for _ in range(lengths[phase]):
            epoch += 1
            run += 1
            model.train()
            batches = epoch_batches(train, vocab, tc.batch_size, batch_rng, tc.expand_references and phase == "mle")
            mean_reward = baseline = None
            if phase == "rl":
                G_all, weighted_b = [], 0.0
                for b in batches:
                    stats = reinforce_step(model, opt, b, idf, sample_rng, vocab)
                    G_all.extend(stats.returns.tolist())
                    weighted_b += len(b) * stats.baseline
                rewards.append(G_all)
                mean_reward = float(np.mean(G_all))
                # size-weighted mean of the per-batch baselines
                baseline = weighted_b / len(G_all)
            else:
                step = tag_pretrain_step if phase == "tag" else mle_step
                for b in batches:
                    step(model, opt, b)
            scores = validate(model, val, vocab, phase)
            _check_finite(scores.loss, f"on validation after epoch {epoch}")
            row = CurveRow(epoch, phase, scores.cider, scores.bleu1, scores.bleu4, scores.loss, mean_reward, baseline)
            curve.append(row)
            if on_epoch is not None:
                on_epoch(row)
            log.info("epoch %d %s val_cider=%.4f val_loss=%.4f", epoch, phase, scores.cider, scores.loss)
            if phase == "tag":
                best_states[phase] = model.state_dict()
                continue
            improved, stop = stopper.update(scores.cider, epoch)
            if improved:
                best_states[phase] = model.state_dict()
                if ckpt is not None:
                    model.save(ckpt, {**meta, "phase": phase, "epoch": epoch, "val_cider": scores.cider})
                if scores.cider > best_overall:
                    best_overall = scores.cider
                    if out is not None:
                        _copy_checkpoint(ckpt, out / "best.rfcp")
                        best_path = out / "best.rfcp"
            if stop:
                stopped = True
                break
        if phase == "tag" and ckpt is not None:
            model.save(ckpt, {**meta, "phase": phase, "epoch": epoch})
        results.append(PhaseResult(phase, run, stopper.best, stopper.best_epoch, stopped, ckpt))

    # leave the model holding the best captioning weights
    finals = [r for r in results if r.phase != "tag"]
    if finals:
        winner = max(finals, key=lambda r: r.best_cider)
        model.load_state_dict(best_states[winner.phase])
    model.eval()
    return FitResult(curve, results, best_overall, best_path, rewards)


def _copy_checkpoint(src: Path, dst: Path) -> None:
    shutil.copyfile(src, dst)
    shutil.copyfile(str(src) + ".json", str(dst) + ".json")
