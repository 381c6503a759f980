"""Multi-user FedSGD simulation with one designated victim per round.

Every user trains the global model on a batch of its local pool, clips and
perturbs the resulting gradients, and uploads them.  The server averages
the target-model gradients of the non-target users only; the victim's
upload is kept for the reconstruction attack.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ldprecon.attack import AttackConfig, run_attack
from ldprecon.core import SeededRng
from ldprecon.data import gen_synthetic_batch
from ldprecon.exceptions import AggregationError, DivergenceError
from ldprecon.ldp import LdpConfig, protect
from ldprecon.metrics import gradient_diff_proportions
from ldprecon.model import forward_backward

VICTIM = "victim"
NON_TARGET = "non-target"
TAU_SMALL = 1e-8


@dataclass
class UserState:
    """One client: a local pool of samples and its own privacy settings.

    ``sigma`` overrides the noise scale derived from ``ldp`` when set.
    """

    user_id: int
    data: object
    ldp: LdpConfig = field(default_factory=LdpConfig)
    role: str = NON_TARGET
    tau: float = TAU_SMALL
    batch_size: int = 8
    sigma: float | None = None

    @property
    def is_victim(self):
        return self.role == VICTIM


@dataclass
class RoundReport:
    index: int
    aggregate: dict
    victim_id: int | None
    victim_bundle: object
    norms: dict
    losses: dict
    victim_batch: object = None

    CSV_COLUMNS = ("round", "victim", "users", "mean_loss", "mean_norm")

    def row(self):
        return (self.index, "" if self.victim_id is None else self.victim_id, len(self.norms),
                float(np.mean(list(self.losses.values()))),
                float(np.mean(list(self.norms.values()))))


@dataclass
class Federation:
    """Fixed parts of a simulation: the malicious structure, the target
    classifier and a held-out test batch."""

    structure: object
    target: object
    test: object
    mask_provider: object = None


def make_users(rng, n_users, pool_size, image_shape, batch_size=8, ldp=None, subject_spec=None):
    """Non-target users with independent synthetic pools."""
    c, h, w = image_shape
    users = []
    for uid, child in enumerate(rng.spawn(n_users)):
        pool = (gen_synthetic_batch(child, pool_size, c, h, w) if subject_spec is None else
                gen_synthetic_batch(child, pool_size, c, h, w, subject_spec))
        users.append(UserState(uid, pool, LdpConfig() if ldp is None else ldp,
                               batch_size=batch_size))
    return users


def designate_victim(users, victim_id, tau, tau_small=TAU_SMALL):
    """Make ``victim_id`` the only victim (full-strength ``tau``); every
    other user runs with ``tau_small``.  ``victim_id=None`` clears roles."""
    ids = {u.user_id for u in users}
    if victim_id is not None and victim_id not in ids:
        raise KeyError(f"victim {victim_id} is not a user")
    for u in users:
        if u.user_id == victim_id:
            u.role = VICTIM
            u.tau = tau
        else:
            u.role = NON_TARGET
            u.tau = tau_small
    return users


def _local_update(fed, params, user, rng):
    pool = user.data
    idx = rng.choice(len(pool), size=min(user.batch_size, len(pool)), replace=False)
    batch = pool.subset(np.sort(idx))
    masks = batch.masks if fed.mask_provider is None else fed.mask_provider.transform(batch)
    loss, bundle = forward_backward(fed.structure, fed.target, params, batch.images,
                                    batch.labels, masks, tau=user.tau)
    return loss, protect(bundle, user.ldp, rng, sigma=user.sigma), batch


def run_round(users, global_params, rng, fed, index=0):
    """One FedSGD round; the victim (if any) is excluded from aggregation."""
    if not any(not u.is_victim for u in users):
        raise AggregationError("no non-target users to aggregate")
    streams = rng.spawn(len(users))
    norms, losses = {}, {}
    total = None
    count = 0
    victim_id = victim_bundle = victim_batch = None
    for user, stream in zip(users, streams):
        loss, bundle, batch = _local_update(fed, global_params, user, stream)
        losses[user.user_id] = loss
        norms[user.user_id] = bundle.norm()
        if user.is_victim:
            victim_id, victim_bundle, victim_batch = user.user_id, bundle, batch
            continue
        grads = bundle.target_grads()
        if total is None:
            total = {k: v.copy() for k, v in grads.items()}
        else:
            for k, v in grads.items():
                total[k] += v
        count += 1
    aggregate = {k: v / count for k, v in total.items()}
    return RoundReport(index, aggregate, victim_id, victim_bundle, norms, losses, victim_batch)


def accuracy(fed, params):
    test = fed.test
    x = test.images.reshape(len(test), -1)
    return float(np.mean(fed.target.predict(params, x) == test.labels))


@dataclass
class TrainResult:
    initial_accuracy: float
    accuracy: list
    reports: list

    CSV_COLUMNS = ("round", "accuracy", "victim", "mean_loss", "mean_norm")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for acc, rep in zip(self.accuracy, self.reports):
            r, victim, _, loss, norm = rep.row()
            w.writerow([r, f"{acc:.6f}", victim, f"{loss:.10g}", f"{norm:.10g}"])
        return buf.getvalue()


def train(users, rounds, lr, fed, params, rng, attack=True, tau_small=TAU_SMALL):
    """FedSGD on the target model for ``rounds`` rounds.

    With ``attack`` a different victim is chosen each round (user
    ``r mod n``) and excluded from aggregation; otherwise every user runs
    with ``tau = 0`` and all uploads are averaged.  Only target-model
    parameters are updated.  Returns a :class:`TrainResult` whose
    ``accuracy`` holds the test accuracy after each round.
    """
    params = {k: v.copy() for k, v in params.items()}
    initial = accuracy(fed, params)
    trace, reports = [], []
    for r in range(rounds):
        if attack:
            designate_victim(users, users[r % len(users)].user_id, fed.structure.tau, tau_small)
        else:
            designate_victim(users, None, 0.0, 0.0)
        rep = run_round(users, params, rng, fed, index=r)
        bad = [uid for uid, loss in rep.losses.items() if not np.isfinite(loss)]
        if bad or not all(np.all(np.isfinite(v)) for v in rep.aggregate.values()):
            raise DivergenceError(f"round {r}: non-finite loss for users {bad or 'aggregate'}; "
                                  f"lower the learning rate (lr={lr})")
        for k, g in rep.aggregate.items():
            params[k] = params[k] - lr * g
        trace.append(accuracy(fed, params))
        reports.append(rep)
    return TrainResult(initial, trace, reports)


def attack_round(users, victim_id, rng, fed, params, cfg=AttackConfig(), index=0):
    """Run one round with ``victim_id`` as the victim and attack its upload."""
    designate_victim(users, victim_id, fed.structure.tau)
    rep = run_round(users, params, rng, fed, index=index)
    reference = rep.victim_bundle.trace.masked_images
    result = run_attack(rep.victim_bundle, fed.structure, cfg, reference)
    return rep, result


def gradient_difference(users, fed, params, rng_seed, relative=True, tau_small=TAU_SMALL):
    """Difference histogram between the aggregate of one round with the
    attack (one victim excluded, others at ``tau_small``) and without it
    (everyone at ``tau = 0``), using identical batches and noise."""
    designate_victim(users, users[0].user_id, fed.structure.tau, tau_small)
    with_attack = run_round(users, params, SeededRng(rng_seed), fed).aggregate
    designate_victim(users, None, 0.0, 0.0)
    without = run_round(users, params, SeededRng(rng_seed), fed).aggregate
    return gradient_diff_proportions(with_attack, without, relative=relative)
