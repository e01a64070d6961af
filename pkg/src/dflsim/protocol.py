"""Peer-to-peer round engine with divergence-gated personalization.

Each round, every client draws a random queue of peers, exchanges unit
fingerprints, and either (a) replaces its whole model with one random
queue member's model when all divergences sit at or below the threshold,
or (b) aggregates feature extractors over the whole queue and classifiers
over the low-divergence subset. Local momentum-SGD training with an
optional feature-anchor penalty then runs unconditionally, and the
fingerprints are refreshed from the new weights.

Peers always serve the state they ended the previous round with, so a
round is deterministic and independent of client iteration order. The
same engine runs the baseline arms (full-model averaging, fixed
personalization, no communication) and the two ablations.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import datagen, nn, representation
from .errors import ConfigError

ALGORITHMS = (
    "ua_pdfl",
    "ua_pdfl_no_cd",
    "ua_pdfl_no_lp",
    "d_fedavg",
    "d_fedper",
    "local",
)

# Arms that exchange fingerprints; no_lp sends only the class profile.
_REP_ARMS = ("ua_pdfl", "ua_pdfl_no_cd", "ua_pdfl_no_lp")
_DROPOUT_ARMS = ("ua_pdfl", "ua_pdfl_no_lp")
_PROXIMAL_ARMS = ("ua_pdfl", "ua_pdfl_no_cd")


@dataclass(frozen=True)
class RoundConfig:
    """Per-round protocol settings shared by every client."""

    algorithm: str = "ua_pdfl"
    n_com: int = 5
    th_i: float = 0.1
    mu: float = 0.1
    epochs: int = 2
    rounds: int = 150
    batch_size: int = 50
    learning_rate: float = 0.05
    lr_decay: float = 0.95
    momentum: float = 0.5

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.n_com < 1:
            raise ConfigError("n_com must be >= 1")
        if self.th_i < 0:
            raise ConfigError("th_i must be >= 0")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")


@dataclass(eq=False)
class ClientData:
    """A client's immutable view into the shared dataset and partition."""

    dataset: datagen.SyntheticDataset
    partition: datagen.Partition
    client_id: int

    @property
    def split(self) -> datagen.ClientSplit:
        return self.partition.split_of(self.client_id)

    @property
    def n_samples(self) -> int:
        return self.split.n_samples


@dataclass(eq=False)
class ClientState:
    """One client: model, optimizer, data view, and current fingerprint."""

    id: int
    model: nn.LayeredModel
    opt: nn.OptimizerState
    data: ClientData
    rep: representation.UnitRep

    @property
    def n_samples(self) -> int:
        return self.data.n_samples


@dataclass(eq=False)
class PeerPayload:
    """Round-start snapshot a peer serves: fingerprint, size, and weights.

    The model is carried for simulation convenience; the communication
    ledger bills only the blocks the receiving rule actually uses.
    """

    sender: int
    rep: representation.UnitRep | None
    n_samples: int
    model: nn.LayeredModel


@dataclass
class CommLedger:
    """Scalar counts received by one client, by payload kind."""

    representations: int = 0
    g_params: int = 0
    h_params: int = 0
    full_model: int = 0

    @property
    def total(self) -> int:
        return self.representations + self.g_params + self.h_params + self.full_model

    def add(self, other: "CommLedger") -> None:
        self.representations += other.representations
        self.g_params += other.g_params
        self.h_params += other.h_params
        self.full_model += other.full_model


@dataclass
class ClientRoundMetrics:
    """What one client reports at the end of a round."""

    client: int
    test_acc: float
    train_loss: float
    dropped: bool
    h_peers: int
    comm: CommLedger = field(default_factory=CommLedger)


def build_clients(
    ds: datagen.SyntheticDataset,
    part: datagen.Partition,
    cfg: RoundConfig,
    seed,
    identical_init: bool = False,
) -> list[ClientState]:
    """Fresh client states with seeded per-client model inits.

    With ``identical_init`` every client starts from the same weights,
    which is the setup where round-1 dropout must fire for everyone.
    """
    states = []
    for i in range(part.n_clients):
        init_seed = [_as_seed(seed), 1, 0 if identical_init else i]
        model = nn.default_model(ds.input_dim, ds.num_classes, seed=init_seed)
        opt = nn.init_optimizer(model, cfg.learning_rate, cfg.momentum, cfg.lr_decay)
        states.append(
            ClientState(
                id=i,
                model=model,
                opt=opt,
                data=ClientData(ds, part, i),
                rep=representation.compute_representation(model),
            )
        )
    return states


def _as_seed(seed) -> int:
    return int(seed)


def build_queue(client_id: int, m: int, n_com: int, rng) -> np.ndarray:
    """Draw n_com distinct peers uniformly, never including the client."""
    if not 0 <= client_id < m:
        raise ValueError(f"client {client_id} outside 0..{m - 1}")
    if not 1 <= n_com <= m - 1:
        raise ConfigError(f"n_com={n_com} must be in [1, {m - 1}] for {m} clients")
    others = np.array([i for i in range(m) if i != client_id])
    return rng.choice(others, size=n_com, replace=False)


def compute_divergences(
    own: representation.UnitRep, payloads: list[PeerPayload]
) -> dict[int, float]:
    """Symmetrized-KL distance from each queue peer's class profile."""
    return {
        p.sender: representation.symmetric_kl(own.values, p.rep.values)
        for p in payloads
    }


def should_dropout(divs, th_i: float) -> bool:
    """True when every queue divergence is at or below the threshold."""
    values = list(divs.values()) if isinstance(divs, dict) else list(divs)
    if not values:
        raise ValueError("divergence set must be non-empty")
    return all(d <= th_i for d in values)


def dropout_replace(payloads: list[PeerPayload], rng) -> tuple[nn.LayeredModel, int]:
    """Copy one uniformly chosen queue peer's full model; returns donor id."""
    if not payloads:
        raise ValueError("queue must be non-empty")
    pick = int(rng.integers(len(payloads)))
    donor = payloads[pick]
    return donor.model.copy(), donor.sender


def _weighted_layers(
    entries: list[tuple[list[nn.DenseLayer], int]]
) -> list[nn.DenseLayer]:
    """Data-size-weighted average of parallel layer blocks."""
    total = sum(w for _, w in entries)
    if total <= 0:
        raise ValueError("total weight must be positive")
    ref = entries[0][0]
    out = []
    for k, ref_layer in enumerate(ref):
        w_acc = np.zeros_like(ref_layer.weights)
        b_acc = np.zeros_like(ref_layer.bias)
        for layers, weight in entries:
            layer = layers[k]
            if layer.weights.shape != ref_layer.weights.shape:
                raise ValueError(f"layer {k} shape mismatch across clients")
            w_acc += (weight / total) * layer.weights
            b_acc += (weight / total) * layer.bias
        out.append(nn.DenseLayer(w_acc, b_acc, ref_layer.activation))
    return out


def layerwise_aggregate(
    own_model: nn.LayeredModel,
    own_n: int,
    payloads: list[PeerPayload],
    divs: dict[int, float],
    th_i: float,
) -> tuple[nn.LayeredModel, int]:
    """Gated aggregation: extractors from everyone, classifiers from the close.

    The feature-extractor average covers the client plus all queue peers;
    the classifier average covers the client plus only peers with
    divergence strictly below th_i. Both averages weight each entry by its
    owner's train-set size. Returns the combined model and the number of
    peers that passed the classifier gate.
    """
    split = own_model.split_index
    g_entries = [(own_model.layers[:split], own_n)]
    h_entries = [(own_model.layers[split:], own_n)]
    for p in payloads:
        g_entries.append((p.model.layers[:split], p.n_samples))
        if divs[p.sender] < th_i:
            h_entries.append((p.model.layers[split:], p.n_samples))
    g = _weighted_layers(g_entries)
    h = _weighted_layers(h_entries)
    return nn.combine(g, h), len(h_entries) - 1


def full_model_aggregate(
    own_model: nn.LayeredModel, own_n: int, payloads: list[PeerPayload]
) -> nn.LayeredModel:
    """Plain data-size-weighted average of whole models, own included."""
    entries = [(own_model.layers, own_n)]
    entries += [(p.model.layers, p.n_samples) for p in payloads]
    return nn.LayeredModel(_weighted_layers(entries), own_model.split_index)


def aux_average(own_features: np.ndarray, peer_features: list[np.ndarray]) -> np.ndarray:
    """Unweighted mean of feature fingerprints, own included."""
    own = np.asarray(own_features, dtype=np.float64)
    acc = own.copy()
    for f in peer_features:
        f = np.asarray(f, dtype=np.float64)
        if f.shape != own.shape:
            raise ValueError(f"feature length {f.shape} does not match {own.shape}")
        acc += f
    return acc / (len(peer_features) + 1)


def local_train(
    state: ClientState,
    aux_avg: np.ndarray | None,
    cfg: RoundConfig,
    round_index: int,
    epoch_seed,
) -> tuple[ClientState, float]:
    """Run E epochs of momentum SGD and refresh the fingerprint.

    The learning rate is ``learning_rate * lr_decay ** round_index``; the
    optimizer's base rate and momentum buffers persist across rounds. When
    ``aux_avg`` is given the anchor penalty mu * ||g(unit) - aux_avg||^2
    joins the loss. Returns the new state and the mean batch loss.
    """
    lr = cfg.learning_rate * cfg.lr_decay**round_index
    opt = replace(state.opt, learning_rate=lr)
    model = state.model
    unit = representation.unit_tensor(model.input_dim)[0]
    mu = cfg.mu if aux_avg is not None else 0.0
    seed_base = list(epoch_seed) if np.ndim(epoch_seed) else [int(epoch_seed)]
    losses = []
    for e in range(cfg.epochs):
        epoch_batches = datagen.batches(
            state.data.partition,
            state.data.client_id,
            state.data.dataset,
            cfg.batch_size,
            epoch_seed=seed_base + [e],
        )
        for x, y in epoch_batches:
            bundle = nn.backward(
                model, x, y, unit_tensor=unit, aux_target=aux_avg, mu=mu
            )
            model, opt = nn.sgd_step(model, bundle, opt)
            losses.append(bundle.loss)
    opt = replace(opt, learning_rate=state.opt.learning_rate)
    new_state = ClientState(
        id=state.id,
        model=model,
        opt=opt,
        data=state.data,
        rep=representation.compute_representation(model),
    )
    return new_state, float(np.mean(losses))


def evaluate_accuracy(model: nn.LayeredModel, data: ClientData) -> float:
    """Top-1 accuracy on the client's own test indices."""
    idx = data.split.test_indices
    if idx.size == 0:
        raise ValueError(f"client {data.client_id} has no test samples")
    logits = nn.forward(model, data.dataset.features[idx])
    pred = logits.argmax(axis=1)
    return float(np.mean(pred == data.dataset.labels[idx]))


def _rep_scalars(state: ClientState, algorithm: str) -> int:
    """Fingerprint scalars one peer sends under the given arm."""
    if algorithm in _PROXIMAL_ARMS:
        return state.rep.scalar_count
    if algorithm == "ua_pdfl_no_lp":
        return state.rep.values.size
    return 0


def _communicate(
    st: ClientState,
    snapshot: list[ClientState],
    cfg: RoundConfig,
    rng,
) -> tuple[nn.LayeredModel, np.ndarray | None, bool, int, CommLedger]:
    """Pre-training phase for one client under its algorithm arm.

    Returns (model to train from, aux anchor or None, dropout flag,
    classifier-gate peer count, ledger delta).
    """
    arm = cfg.algorithm
    delta = CommLedger()
    if arm == "local":
        return st.model, None, False, 0, delta

    queue = build_queue(st.id, len(snapshot), cfg.n_com, rng)
    payloads = [
        PeerPayload(
            sender=int(j),
            rep=snapshot[j].rep if arm in _REP_ARMS else None,
            n_samples=snapshot[j].n_samples,
            model=snapshot[j].model,
        )
        for j in queue
    ]
    g_count = nn.g_param_count(st.model)
    h_count = nn.h_param_count(st.model)
    full_count = g_count + h_count

    if arm == "d_fedavg":
        model = full_model_aggregate(st.model, st.n_samples, payloads)
        delta.full_model += cfg.n_com * full_count
        return model, None, False, cfg.n_com, delta

    if arm == "d_fedper":
        g = _weighted_layers(
            [(st.model.layers[: st.model.split_index], st.n_samples)]
            + [(p.model.layers[: p.model.split_index], p.n_samples) for p in payloads]
        )
        model = nn.combine(g, st.model.layers[st.model.split_index :])
        delta.g_params += cfg.n_com * g_count
        return model, None, False, 0, delta

    # Fingerprint-exchanging arms.
    delta.representations += sum(_rep_scalars(snapshot[j], arm) for j in queue)
    divs = compute_divergences(st.rep, payloads)
    fire = arm in _DROPOUT_ARMS and should_dropout(divs, cfg.th_i)

    if fire:
        model, _donor = dropout_replace(payloads, rng)
        delta.full_model += full_count
        dropped = True
        h_peers = 0
    elif arm == "ua_pdfl_no_lp":
        model = full_model_aggregate(st.model, st.n_samples, payloads)
        delta.full_model += cfg.n_com * full_count
        dropped = False
        h_peers = cfg.n_com
    else:
        model, h_peers = layerwise_aggregate(
            st.model, st.n_samples, payloads, divs, cfg.th_i
        )
        delta.g_params += cfg.n_com * g_count
        delta.h_params += h_peers * h_count
        dropped = False

    aux_avg = None
    if arm in _PROXIMAL_ARMS:
        aux_avg = aux_average(st.rep.features, [p.rep.features for p in payloads])
    return model, aux_avg, dropped, h_peers, delta


def run_round(
    states: list[ClientState],
    cfg: RoundConfig,
    round_index: int,
    master_rng,
) -> tuple[list[ClientState], list[ClientRoundMetrics]]:
    """Advance every client one round against round-start snapshots.

    Per-client randomness comes from independent child streams, so the
    result does not depend on iteration order. Metrics are returned in
    client-id order.
    """
    m = len(states)
    if cfg.algorithm != "local":
        if m < 2:
            raise ConfigError("communicating arms need at least 2 clients")
        if cfg.n_com > m - 1:
            raise ConfigError(f"n_com={cfg.n_com} too large for {m} clients")
    snapshot = states
    children = master_rng.spawn(m)
    order = master_rng.permutation(m)
    new_states: list[ClientState | None] = [None] * m
    metrics: list[ClientRoundMetrics | None] = [None] * m
    for i in order:
        i = int(i)
        st = snapshot[i]
        rng = children[i]
        model, aux_avg, dropped, h_peers, delta = _communicate(st, snapshot, cfg, rng)
        staged = ClientState(st.id, model, st.opt, st.data, st.rep)
        epoch_key = int(rng.integers(2**62))
        trained, loss = local_train(staged, aux_avg, cfg, round_index, [epoch_key])
        new_states[i] = trained
        metrics[i] = ClientRoundMetrics(
            client=i,
            test_acc=evaluate_accuracy(trained.model, trained.data),
            train_loss=loss,
            dropped=dropped,
            h_peers=h_peers,
            comm=delta,
        )
    return new_states, metrics


@dataclass
class RunRecord:
    """One metrics row: a client's state after a given round."""

    round: int
    client: int
    test_acc: float
    train_loss: float
    dropped: bool
    h_peers: int
    comm_cum: int


@dataclass(eq=False)
class ExperimentResult:
    """Everything a single (algorithm, seed) run produced."""

    records: list[RunRecord]
    divergences: list[tuple[int, np.ndarray]]
    ledgers: list[CommLedger]
    final_states: list[ClientState]

    def final_accuracies(self) -> np.ndarray:
        last = max(r.round for r in self.records)
        rows = sorted(
            (r for r in self.records if r.round == last), key=lambda r: r.client
        )
        return np.array([r.test_acc for r in rows])

    @property
    def mean_final_accuracy(self) -> float:
        return float(self.final_accuracies().mean())


def run_experiment(
    ds: datagen.SyntheticDataset,
    part: datagen.Partition,
    cfg: RoundConfig,
    seed,
    record_divergence: bool = False,
    identical_init: bool = False,
) -> ExperimentResult:
    """Run R rounds for one arm and seed, recording per-round metrics.

    Round 0 rows evaluate the freshly initialized models before any
    communication or training; rows for rounds 1..R follow each completed
    round. Fully deterministic given (config, seed).
    """
    states = build_clients(ds, part, cfg, seed, identical_init=identical_init)
    records = []
    divergences = []
    ledgers = [CommLedger() for _ in states]
    for st in states:
        idx = st.data.split.train_indices
        probs = nn.softmax(nn.forward(st.model, ds.features[idx]))
        loss0 = nn.cross_entropy(probs, ds.labels[idx])
        records.append(
            RunRecord(
                round=0,
                client=st.id,
                test_acc=evaluate_accuracy(st.model, st.data),
                train_loss=loss0,
                dropped=False,
                h_peers=0,
                comm_cum=0,
            )
        )
    if record_divergence:
        divergences.append(
            (0, representation.divergence_matrix([st.rep for st in states]))
        )
    master = np.random.default_rng([_as_seed(seed), 2])
    for r0 in range(cfg.rounds):
        states, round_metrics = run_round(states, cfg, r0, master)
        for rec in round_metrics:
            ledgers[rec.client].add(rec.comm)
            records.append(
                RunRecord(
                    round=r0 + 1,
                    client=rec.client,
                    test_acc=rec.test_acc,
                    train_loss=rec.train_loss,
                    dropped=rec.dropped,
                    h_peers=rec.h_peers,
                    comm_cum=ledgers[rec.client].total,
                )
            )
        if record_divergence:
            divergences.append(
                (r0 + 1, representation.divergence_matrix([st.rep for st in states]))
            )
    return ExperimentResult(records, divergences, ledgers, states)
