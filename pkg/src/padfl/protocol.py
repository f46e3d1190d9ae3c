"""Federated round protocol.

Server loop per round: sample clients, generate and send width-matched
personal parameters alongside the shared general factors, run local
updates, average the general factors over the round's survivors, then
regress the hyper-network onto the locally trained personal parameters.
Evaluation fuses the freshly received model with each client's last
locally trained model by a validation-accuracy line search.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from . import decomp, hypernet
from .data import ClientData
from .errors import ConfigurationError, NumericError
from .model import (
    ClientModel,
    GeneralParams,
    HeadParams,
    Layout,
    PersonalParams,
    accuracy,
    combine,
    head_logits_t,
    init_decomposed,
    representation_t,
)

# rng stream tags so every consumer draws from its own deterministic stream
TAG_SERVER = 0x5E1EC7
TAG_CLIENT = 0xC11E47
TAG_INIT = 0x171217
TAG_CAPACITY = 0xCAFACE
TAG_DATA = 0xDA7A
TAG_PARTITION = 0x9A87


@dataclass
class ClientProfile:
    id: int
    capacity: float                 # affordable fraction of the full model cost
    width: Fraction                 # largest grid width with width^2 <= capacity
    data: ClientData = None
    local_model: ClientModel = None  # last locally trained model, kept on-client


def width_for_capacity(r, grid) -> Fraction:
    """Largest grid width whose quadratic cost fits the capacity; clients
    below the smallest width are clamped to it."""
    best = grid[0]
    for p in grid:
        if float(p) ** 2 <= r:
            best = p
    return best


def assign_capacities(num_clients, mode, rng, grid) -> list:
    """Hetero: capacity uniform in [0.01, 1]; Ideal: everyone full-size."""
    if not grid:
        raise ConfigurationError("empty width grid")
    if mode == "ideal":
        caps = np.ones(num_clients)
    elif mode == "hetero":
        caps = rng.uniform(0.01, 1.0, size=num_clients)
    else:
        raise ConfigurationError(f"unknown capacity mode {mode!r}")
    return [ClientProfile(i, float(caps[i]), width_for_capacity(float(caps[i]), grid))
            for i in range(num_clients)]


def early_stop(history, patience) -> bool:
    """True once the best value has stood unbeaten for `patience` rounds
    (counting the round that set it)."""
    if patience < 1:
        raise ConfigurationError("patience must be >= 1")
    if not history:
        return False
    best_at = int(np.argmax(history))
    rounds_since = len(history) - 1 - best_at
    return rounds_since >= max(1, patience - 1)


# ---------------------------------------------------------------------------
# local training

def orthogonal_reg_t(u_nodes, specs):
    """Off-diagonal Gram penalty sum ||U^T U - diag||^2 over conv layers."""
    terms = []
    for node, spec in zip(u_nodes, specs):
        if spec.kind != "conv":
            continue
        gram = ad.matmul(ad.transpose(node, (1, 0)), node)
        mask = 1.0 - np.eye(gram.data.shape[0])
        terms.append(ad.frobenius_sq(ad.mul(gram, ad.const(mask))))
    if not terms:
        return None
    return ad.add_n(terms)


def orthogonal_reg(general_factors, specs) -> float:
    node = orthogonal_reg_t([ad.const(u) for u in general_factors], specs)
    return 0.0 if node is None else float(node.data)


@dataclass
class LocalResult:
    client: int
    ok: bool
    general: GeneralParams = None
    personal: PersonalParams = None
    train_loss: float = float("nan")
    used_idx: np.ndarray = None


def local_update(general, personal, global_head, client: ClientProfile, layout: Layout,
                 *, epochs, batch, lr, reg_coef, rng, recovery="padfl") -> LocalResult:
    """E epochs of minibatch SGD on one client.

    Loss = CE on the frozen shared head + CE of the personal head on the
    detached representation + reg_coef * orthogonal penalty. Trains the
    general factors, personal factors/biases and the personal head; the
    shared head never changes.
    """
    arch = layout.arch
    p = client.width
    x_all, y_all = client.data.dataset.features, client.data.dataset.labels
    train_idx = client.data.train_idx
    u_arr = [f.copy() for f in general.factors]
    v_arr = [f.copy() for f in personal.factors]
    b_arr = [b.copy() for b in personal.biases]
    hw_arr, hb_arr = personal.head_w.copy(), personal.head_b.copy()
    for arr in u_arr + v_arr + b_arr + [hw_arr, hb_arr]:
        if not np.isfinite(arr).all():
            return LocalResult(client.id, ok=False)
    gw, gb = ad.const(global_head.w), ad.const(global_head.b)
    losses = []
    used = []
    for _ in range(epochs):
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), batch):
            sel = train_idx[order[start:start + batch]]
            used.append(sel)
            x = x_all[sel]
            y = y_all[sel]
            u_nodes = [ad.leaf(a) for a in u_arr]
            v_nodes = [ad.leaf(a) for a in v_arr]
            b_nodes = [ad.leaf(a) for a in b_arr]
            hw_node, hb_node = ad.leaf(hw_arr), ad.leaf(hb_arr)
            rep = representation_t(layout, u_nodes, v_nodes, b_nodes, ad.const(x), p,
                                   recovery)
            loss = ad.cross_entropy(head_logits_t(rep, gw, gb), y)
            loss = ad.add(loss, ad.cross_entropy(
                head_logits_t(ad.detach(rep), hw_node, hb_node), y))
            if reg_coef:
                reg = orthogonal_reg_t(u_nodes, layout.specs)
                if reg is not None:
                    loss = ad.add(loss, ad.scale(reg, reg_coef))
            val = float(loss.data)
            if not np.isfinite(val):
                return LocalResult(client.id, ok=False)
            losses.append(val)
            ad.backward(loss)
            leaves = u_nodes + v_nodes + b_nodes + [hw_node, hb_node]
            arrays = u_arr + v_arr + b_arr
            for j, node in enumerate(leaves[:-2]):
                if node.grad is not None:
                    arrays[j] -= lr * node.grad
            if hw_node.grad is not None:
                hw_arr -= lr * hw_node.grad
            if hb_node.grad is not None:
                hb_arr -= lr * hb_node.grad
    return LocalResult(
        client.id, ok=True,
        general=GeneralParams(u_arr),
        personal=PersonalParams(v_arr, b_arr, hw_arr, hb_arr),
        train_loss=float(np.mean(losses)) if losses else float("nan"),
        used_idx=np.unique(np.concatenate(used)) if used else np.empty(0, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# test-time model selection

def select_test_model(received: ClientModel, local, val_xy, layout: Layout,
                      grid_size=11, recovery="padfl"):
    """Line-search the received/local interpolation on validation accuracy.

    Returns (model, alpha, val_accuracy); ties prefer the smaller alpha
    (the aggregated model). Missing local model -> alpha 0; empty
    validation set -> alpha 1 (local model).
    """
    if local is None:
        x, y = val_xy
        acc = accuracy(layout, received, x, y, recovery) if len(y) else float("nan")
        return received, 0.0, acc
    x, y = val_xy
    if len(y) == 0:
        return local, 1.0, float("nan")
    if grid_size < 2:
        raise ConfigurationError("alpha grid needs at least 2 points")
    best = (None, -1.0, 0.0)
    for alpha in np.linspace(0.0, 1.0, grid_size):
        fused = combine(received, local, float(alpha))
        acc = accuracy(layout, fused, x, y, recovery)
        if acc > best[1]:
            best = (fused, acc, float(alpha))
    return best[0], best[2], best[1]


# ---------------------------------------------------------------------------
# round bookkeeping

@dataclass
class ClientRow:
    client: int
    capacity: float
    width: Fraction
    selected: bool
    train_loss: float
    val_acc: float
    test_acc: float
    alpha: float  # nan for methods without fusion


@dataclass
class RoundAudit:
    returned_general: dict
    aggregated: list
    head_w: np.ndarray
    head_b: np.ndarray
    used_idx: dict


@dataclass
class RoundMetrics:
    round: int
    eta: float
    selected: list
    failed: list
    rows: list
    mean_val: float
    mean_test: float
    std_test: float
    params_exchanged: int
    hn_loss: float = float("nan")
    audit: RoundAudit = None


def mean_arrays(array_lists):
    """Elementwise mean with a fixed (client-id sorted) reduction order."""
    acc = [a.copy() for a in array_lists[0]]
    for arrs in array_lists[1:]:
        for a, b in zip(acc, arrs):
            a += b
    return [a / len(array_lists) for a in acc]


class FederatedMethod:
    """Round-loop skeleton shared by the decomposed protocol and baselines."""

    def __init__(self, profiles, layout: Layout, cfg, seed):
        self.profiles = profiles
        self.layout = layout
        self.cfg = cfg
        self.seed = seed
        self.server_rng = np.random.default_rng(np.random.SeedSequence((seed, TAG_SERVER)))

    def client_rng(self, t, client_id):
        return np.random.default_rng(
            np.random.SeedSequence((self.seed, TAG_CLIENT, t, client_id)))

    def eta(self, t):
        return self.cfg.lr * self.cfg.lr_decay ** t

    def sample_clients(self, m):
        n = len(self.profiles)
        if m > n:
            raise ConfigurationError(f"cannot sample {m} of {n} clients")
        return sorted(int(i) for i in self.server_rng.choice(n, size=m, replace=False))

    def run_round(self, t, executor=None, audit=False) -> RoundMetrics:
        selected = self.sample_clients(self.cfg.per_round)
        eta = self.eta(t)

        def work(i):
            return self.train_client(t, i, eta)

        if executor is not None:
            results = {r.client: r for r in executor.map(work, selected)}
        else:
            results = {i: work(i) for i in selected}
        ok = [i for i in selected if results[i].ok]
        failed = [i for i in selected if not results[i].ok]
        if not ok:
            raise NumericError(f"every client failed in round {t}")
        audit_obj = self.aggregate(t, ok, results, audit)
        rows = [self.evaluate_client(self.profiles[i],
                                     results.get(i) if results.get(i) and results[i].ok else None)
                for i in range(len(self.profiles))]
        tests = np.array([r.test_acc for r in rows])
        vals = np.array([r.val_acc for r in rows])
        if audit_obj is not None:
            audit_obj.used_idx = {i: results[i].used_idx for i in ok}
        return RoundMetrics(
            round=t, eta=eta, selected=selected, failed=failed, rows=rows,
            mean_val=float(vals.mean()), mean_test=float(tests.mean()),
            std_test=float(tests.std()), params_exchanged=self.round_payload(selected),
            hn_loss=getattr(self, "last_hn_loss", float("nan")), audit=audit_obj)

    # method-specific hooks
    def train_client(self, t, i, eta) -> LocalResult:
        raise NotImplementedError

    def aggregate(self, t, ok, results, audit):
        raise NotImplementedError

    def evaluate_client(self, profile, result) -> ClientRow:
        raise NotImplementedError

    def round_payload(self, selected) -> int:
        raise NotImplementedError


class DecomposedFL(FederatedMethod):
    """The decomposed protocol with hyper-network personal aggregation.

    Flags cover the two ablations: hn_aggregation=False keeps personal
    parameters client-local after the first contact, recovery="flanc"
    swaps the channel-aware recovery for the input-slab one.
    """

    def __init__(self, profiles, layout, cfg, seed, hn_aggregation=True, recovery="padfl"):
        super().__init__(profiles, layout, cfg, seed)
        self.hn_aggregation = hn_aggregation
        self.recovery = recovery
        init_rng = np.random.default_rng(np.random.SeedSequence((seed, TAG_INIT)))
        general, _personal, _biases, head = init_decomposed(layout, init_rng)
        self.general = general
        self.global_head = head
        self.hn = hypernet.init_hypernet(
            layout, len(profiles), cfg.hn_embed, cfg.hn_hidden, cfg.hn_depth, init_rng)
        self.last_hn_loss = float("nan")
        # personal parameters kept client-side for the no-aggregation ablation
        self.local_personal = {}

    def sent_personal(self, i) -> PersonalParams:
        """What the server sends client i this round."""
        profile = self.profiles[i]
        if not self.hn_aggregation and i in self.local_personal:
            return self.local_personal[i].copy()
        return hypernet.generate_personal(self.hn, i, self.layout, profile.width,
                                          prune_kind=self.recovery)

    def train_client(self, t, i, eta):
        profile = self.profiles[i]
        sliced = self.global_head.sliced(self.layout.head_in(profile.width))
        return local_update(
            self.general, self.sent_personal(i), sliced, profile, self.layout,
            epochs=self.cfg.epochs, batch=self.cfg.batch, lr=eta,
            reg_coef=self.cfg.reg_lambda, rng=self.client_rng(t, i),
            recovery=self.recovery)

    def aggregate(self, t, ok, results, audit):
        audit_obj = None
        if audit:
            audit_obj = RoundAudit(
                returned_general={i: [f.copy() for f in results[i].general.factors]
                                  for i in ok},
                aggregated=None, head_w=self.global_head.w.copy(),
                head_b=self.global_head.b.copy(), used_idx=None)
        self.general = GeneralParams(mean_arrays(
            [results[i].general.factors for i in sorted(ok)]))
        if audit_obj is not None:
            audit_obj.aggregated = [f.copy() for f in self.general.factors]
        for i in ok:
            res = results[i]
            profile = self.profiles[i]
            head = HeadParams(res.personal.head_w, res.personal.head_b)
            profile.local_model = ClientModel(res.general, res.personal, head,
                                              profile.width)
            if not self.hn_aggregation:
                self.local_personal[i] = res.personal.copy()
        if self.hn_aggregation:
            returned = {i: results[i].personal for i in ok}
            widths = {i: self.profiles[i].width for i in ok}
            self.hn, self.last_hn_loss = hypernet.hn_step(
                self.hn, returned, widths, self.layout, self.cfg.hn_lr,
                prune_kind=self.recovery)
        return audit_obj

    def evaluate_client(self, profile, result):
        p = profile.width
        received = ClientModel(self.general, self.sent_personal(profile.id),
                               self.global_head.sliced(self.layout.head_in(p)), p)
        fused, alpha, val_acc = select_test_model(
            received, profile.local_model, profile.data.val_xy(), self.layout,
            grid_size=self.cfg.alpha_grid, recovery=self.recovery)
        x, y = profile.data.test_xy()
        test_acc = accuracy(self.layout, fused, x, y, self.recovery)
        return ClientRow(profile.id, profile.capacity, p, result is not None,
                         result.train_loss if result else float("nan"),
                         val_acc, test_acc,
                         alpha if profile.local_model is not None else float("nan"))

    def round_payload(self, selected):
        total = 0
        for i in selected:
            p = self.profiles[i].width
            for idx, (spec, coef) in enumerate(zip(self.layout.specs, self.layout.coefs)):
                total += decomp.param_count(spec, coef, p,
                                            in_kept=self.layout.kept_inputs(idx, p))
            total += self.layout.classes * self.layout.head_in(p) + self.layout.classes
        return total
