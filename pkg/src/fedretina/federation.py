"""FederatedAveraging: round orchestration, weighted aggregation and convergence."""
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from fedretina.checkpoint import save_checkpoint
from fedretina.config import (
    CONVERGENCE_DELTA,
    CONVERGENCE_PATIENCE,
    LOCAL_EPOCHS,
    MAX_ROUNDS,
    PARTICIPATION,
)
from fedretina.data_utils import Dataset
from fedretina.errors import AggregationError, ConfigError, EmptyDatasetError, ProtocolError
from fedretina.metrics import loss_and_accuracy
from fedretina.model import LayerSpec, Model, build_model, default_specs
from fedretina.protocol import ClientUpdate, GlobalModel
from fedretina.tensor_utils import ParameterSet
from fedretina.training import TrainConfig, improved, train_local
from fedretina.transport import LoopbackTransport, Transport

logger = logging.getLogger(__name__)

Update = Tuple[str, int, ParameterSet]
GlobalEvaluator = Callable[[ParameterSet], Tuple[float, float]]


@dataclass(frozen=True)
class InstitutionProfile:
    client_id: str
    n_k: int
    local_epochs: int = LOCAL_EPOCHS
    train_overrides: Tuple[Tuple[str, object], ...] = ()

    def validate(self) -> "InstitutionProfile":
        if not self.client_id:
            raise ConfigError("institution client_id must be nonempty")
        if self.n_k < 1:
            raise ConfigError(f"{self.client_id}: n_k must be >= 1, got {self.n_k}")
        if self.local_epochs < 0:
            raise ConfigError(f"{self.client_id}: local_epochs must be >= 0, got {self.local_epochs}")
        return self


@dataclass(frozen=True)
class FederationConfig:
    clients: Tuple[InstitutionProfile, ...]
    max_rounds: int = MAX_ROUNDS
    convergence_patience: int = CONVERGENCE_PATIENCE
    convergence_delta: float = CONVERGENCE_DELTA
    participation: float = PARTICIPATION
    seed: int = 0
    allow_partial: bool = False

    def validate(self) -> "FederationConfig":
        if self.max_rounds < 1:
            raise ConfigError(f"max_rounds must be >= 1, got {self.max_rounds}")
        if not self.clients:
            raise ConfigError("a federation needs at least one institution")
        ids = [profile.validate().client_id for profile in self.clients]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"institution ids must be unique, got {ids}")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError(f"participation must be in (0, 1], got {self.participation}")
        if self.convergence_patience < 1:
            raise ConfigError(f"convergence_patience must be >= 1, got {self.convergence_patience}")
        if self.convergence_delta < 0:
            raise ConfigError(f"convergence_delta must be >= 0, got {self.convergence_delta}")
        return self

    def profile(self, client_id: str) -> InstitutionProfile:
        for profile in self.clients:
            if profile.client_id == client_id:
                return profile
        raise KeyError(client_id)


@dataclass(frozen=True)
class ClientRoundStat:
    client_id: str
    n_k: int
    weight: float
    update_checksum: str
    local_val_loss: float


@dataclass(frozen=True)
class RoundRecord:
    t: int
    participants: Tuple[str, ...]
    clients: Tuple[ClientRoundStat, ...]
    aggregate_checksum: str
    global_val_loss: Optional[float] = None
    global_val_accuracy: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- aggregation

def aggregation_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    return sizes / sizes.sum()


def aggregate(updates: Sequence[Update]) -> ParameterSet:
    """n_k-weighted mean of the client parameter sets.

    Accumulation is float64 in ascending client_id order, so the result does
    not depend on arrival order. Tensors identical across clients pass
    through untouched and every element stays within the clients' range.
    """
    if not updates:
        raise AggregationError("no updates to aggregate")
    seen = set()
    for client_id, n_k, _ in updates:
        if client_id in seen:
            raise ProtocolError(f"duplicate client id {client_id!r} in round updates")
        seen.add(client_id)
        if n_k < 1:
            raise AggregationError(f"client {client_id}: n_k must be >= 1, got {n_k}")

    ordered = sorted(updates, key=lambda update: update[0])
    reference_id, _, reference = ordered[0]
    for client_id, _, params in ordered[1:]:
        if params.names != reference.names:
            missing = sorted(set(reference.names) ^ set(params.names)) or params.names
            raise AggregationError(f"client {client_id}: tensor names differ from {reference_id} ({missing[0]!r})")
        for (name, a), (_, b) in zip(reference, params):
            if a.shape != b.shape:
                raise AggregationError(
                    f"client {client_id}: tensor {name!r} has shape {b.shape}, {reference_id} has {a.shape}")

    weights = aggregation_weights([n_k for _, n_k, _ in ordered])
    entries = []
    for index, name in enumerate(reference.names):
        arrays = [params.arrays[index] for _, _, params in ordered]
        first = arrays[0]
        if all(a.dtype == first.dtype and a.tobytes() == first.tobytes() for a in arrays[1:]):
            entries.append((name, first.copy()))
            continue
        total = np.zeros(first.shape, dtype=np.float64)
        for weight, array in zip(weights, arrays):
            total += weight * array.astype(np.float64)
        low = np.minimum.reduce([a.astype(np.float64) for a in arrays])
        high = np.maximum.reduce([a.astype(np.float64) for a in arrays])
        entries.append((name, np.clip(total, low, high).astype(first.dtype)))
    return ParameterSet(entries)


def select_participants(client_ids: Sequence[str], participation: float, seed: int, t: int) -> List[str]:
    """max(1, ceil(C*K)) clients drawn uniformly from a (seed, t) stream, sorted by id."""
    ordered = sorted(client_ids)
    count = max(1, math.ceil(participation * len(ordered) - 1e-9))
    if count >= len(ordered):
        return ordered
    chosen = np.random.default_rng([seed, t]).choice(len(ordered), size=count, replace=False)
    return sorted(ordered[i] for i in chosen)


# ---------------------------------------------------------------- institutions

def round_seed(base_seed: int, t: int, client_id: str) -> int:
    sequence = np.random.SeedSequence([base_seed, t, zlib.crc32(client_id.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])


class InstitutionClient:
    """One institution's InstitutionUpdate: E local epochs from the broadcast weights."""

    def __init__(self, client_id: str, train: Dataset, validation: Dataset,
                 specs: Sequence[LayerSpec], train_config: TrainConfig,
                 local_epochs: int = LOCAL_EPOCHS, dtype=np.float32):
        if len(train) == 0 or len(validation) == 0:
            raise EmptyDatasetError(f"{client_id}: training and validation sets must be nonempty")
        self.client_id = client_id
        self.train = train
        self.validation = validation
        self.specs = list(specs)
        self.train_config = train_config
        self.local_epochs = local_epochs
        self.dtype = dtype

    @property
    def n_k(self) -> int:
        return len(self.train)

    def handle(self, message: GlobalModel) -> ClientUpdate:
        model = build_model(self.specs, seed=0, input_shape=self.train.image_shape, dtype=self.dtype)
        model.load_state(message.params)
        config = replace(self.train_config.for_local_epochs(self.local_epochs),
                         seed=round_seed(self.train_config.seed, message.round, self.client_id))
        model, history = train_local(model, self.train, self.validation, config)
        if history:
            val_loss = min(record.val_loss for record in history)
        else:
            val_loss, _ = loss_and_accuracy(model, self.validation)
        logger.info("%s: round %d done, local val loss %.4f", self.client_id, message.round, val_loss)
        return ClientUpdate(message.round, self.client_id, self.n_k, model.state_dict(), val_loss)


def make_clients(config: FederationConfig, client_datasets: Mapping[str, Tuple[Dataset, Dataset]],
                 specs: Sequence[LayerSpec], train_config: TrainConfig,
                 dtype=np.float32) -> List[InstitutionClient]:
    """InstitutionClients for every profile, with its per-institution overrides applied."""
    clients = []
    for profile in config.clients:
        if profile.client_id not in client_datasets:
            raise ConfigError(f"no dataset for institution {profile.client_id!r}")
        train, validation = client_datasets[profile.client_id]
        client_config = replace(train_config, **dict(profile.train_overrides))
        clients.append(InstitutionClient(profile.client_id, train, validation, specs, client_config,
                                         profile.local_epochs, dtype))
    return clients


# ---------------------------------------------------------------- rounds

def run_round(global_state: ParameterSet, t: int, clients: Mapping[str, int], transport: Transport,
              config: FederationConfig,
              evaluate_global: Optional[GlobalEvaluator] = None) -> Tuple[ParameterSet, RoundRecord]:
    """Broadcast, wait for every selected update, aggregate.

    `clients` maps client_id to the n_k announced at handshake.
    """
    selected = select_participants(list(clients), config.participation, config.seed, t)
    updates = transport.exchange(GlobalModel(t, global_state), selected, allow_partial=config.allow_partial)
    for client_id, update in updates.items():
        if update.n_k != clients[client_id]:
            raise ProtocolError(f"{client_id}: n_k changed from {clients[client_id]} to {update.n_k}")
        if not update.params.all_finite():
            raise AggregationError(f"client {client_id}: update for round {t} has non-finite values")

    participants = sorted(updates)
    new_state = aggregate([(cid, updates[cid].n_k, updates[cid].params) for cid in participants])
    weights = aggregation_weights([updates[cid].n_k for cid in participants])
    stats = tuple(
        ClientRoundStat(cid, updates[cid].n_k, float(w), updates[cid].params.checksum(), updates[cid].val_loss)
        for cid, w in zip(participants, weights)
    )
    record = RoundRecord(t, tuple(participants), stats, new_state.checksum())
    if evaluate_global is not None:
        loss, accuracy = evaluate_global(new_state)
        record = replace(record, global_val_loss=loss, global_val_accuracy=accuracy)
    return new_state, record


@dataclass
class _Convergence:
    patience: int
    delta: float
    reference: float = float("inf")
    stale: int = 0
    history: List[float] = field(default_factory=list)

    def update(self, loss: float) -> bool:
        """Record a round's loss; True once `patience` rounds passed without improvement."""
        self.history.append(loss)
        if improved(loss, self.reference, self.delta):
            self.reference, self.stale = loss, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def run_federation(config: FederationConfig, client_datasets: Mapping[str, Tuple[Dataset, Dataset]],
                   global_validation: Dataset, specs: Optional[Sequence[LayerSpec]] = None,
                   train_config: Optional[TrainConfig] = None, transport: Optional[Transport] = None,
                   checkpoint_dir=None, dtype=np.float32, workers: int = 1) -> Tuple[Model, List[RoundRecord]]:
    """Run FedAvg until the global validation loss stops improving or max_rounds is reached.

    Without a transport the institutions run in-process over a loopback
    transport built from `client_datasets` (client_id -> (train, validation)).
    Returns the round with the lowest global validation loss and the history.
    """
    config.validate()
    if len(global_validation) == 0:
        raise EmptyDatasetError("global validation set is empty")
    specs = default_specs() if specs is None else list(specs)
    train_config = train_config or TrainConfig.federated()
    owns_transport = transport is None
    if owns_transport:
        transport = LoopbackTransport(make_clients(config, client_datasets, specs, train_config, dtype), workers)

    participants = transport.participants()
    expected = {profile.client_id for profile in config.clients}
    if set(participants) != expected:
        raise ProtocolError(f"joined institutions {sorted(participants)} do not match {sorted(expected)}")

    model = build_model(specs, config.seed, input_shape=global_validation.image_shape, dtype=dtype)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    def evaluate_global(state: ParameterSet) -> Tuple[float, float]:
        model.load_state(state)
        return loss_and_accuracy(model, global_validation)

    state = model.state_dict()
    best_loss, best_state = float("inf"), state
    convergence = _Convergence(config.convergence_patience, config.convergence_delta)
    history: List[RoundRecord] = []
    try:
        for t in range(1, config.max_rounds + 1):
            state, record = run_round(state, t, participants, transport, config, evaluate_global)
            history.append(record)
            logger.info("round %d: participants %s, global val loss %.4f, acc %.3f",
                        t, ",".join(record.participants), record.global_val_loss, record.global_val_accuracy)
            if checkpoint_dir is not None:
                save_checkpoint(model, t, checkpoint_dir / f"round_{t:03d}.fdck")
            if record.global_val_loss < best_loss:
                best_loss, best_state = record.global_val_loss, state
                if checkpoint_dir is not None:
                    save_checkpoint(model, t, checkpoint_dir / "best.fdck")
            if convergence.update(record.global_val_loss):
                logger.info("converged after round %d (best global val loss %.4f)", t, best_loss)
                break
    except Exception as exc:
        if not owns_transport:
            transport.close("federation aborted: " + " ".join(str(exc).split()))
        raise
    transport.close()
    model.load_state(best_state)
    return model.eval(), history
