"""Set classifier for the mixed-Gamma task, trained end to end through the
transport plan.

Architecture: each scalar observation is lifted to a d-vector by a two-layer
rectifier net, the set of lifted vectors is aggregated (mean/std pooling, or
the barycentric displacement against a trainable reference, optionally with
attention intensities), and an affine classifier scores the classes.

Differentiation is reverse-mode by hand. The scaling iteration runs to a
fixed depth during training so the computation graph has a fixed shape;
every scaling vector is kept on the tape and the backward pass walks the
iterations in reverse. No autodiff framework involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core_ot import SinkhornConfig
from .datagen import ToyDataset
from .embedding import ReferenceSet
from .oracle import SampleSet1D, VARIANCE_FLOOR, _as_sample_set

__all__ = [
    "AGGREGATOR_KINDS",
    "ToyModel",
    "TrainConfig",
    "GradientTape",
    "NumericalError",
    "init_toy_model",
    "forward",
    "loss",
    "backward",
    "train",
    "evaluate",
    "save_model",
    "load_model",
]

AGGREGATOR_KINDS = ("stats", "ot", "ot-att")
OPTIMIZER_KINDS = ("adam", "sgd")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericalError(FloatingPointError):
    """A forward or backward pass produced a non-finite value."""

    def __init__(self, node: str, phase: str):
        self.node = node
        super().__init__(f"non-finite values at node {node!r} during {phase}")


@dataclass
class ToyModel:
    """Lifter + aggregator + classifier parameters.

    The lifter maps a scalar observation through ``hidden`` rectifier units
    to a d-vector: W1/b1 are (hidden,), W2 is (d, hidden), b2 is (d,).
    ``reference`` holds the trainable reference set for the transport
    aggregators and must be None for stats pooling; only the "ot-att" kind
    reads its attention_element.
    """

    aggregator_kind: str
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray
    reference: ReferenceSet | None = None

    def __post_init__(self):
        if self.aggregator_kind not in AGGREGATOR_KINDS:
            raise ValueError(
                f"aggregator_kind must be one of {AGGREGATOR_KINDS}, "
                f"got {self.aggregator_kind!r}"
            )
        if self.aggregator_kind == "stats":
            if self.reference is not None:
                raise ValueError("stats pooling takes no reference set")
            expected = 2 * self.feature_dim
        else:
            if self.reference is None:
                raise ValueError(f"{self.aggregator_kind!r} needs a reference set")
            if self.reference.dim != self.feature_dim:
                raise ValueError(
                    f"reference dimension {self.reference.dim} does not match "
                    f"lifter output {self.feature_dim}"
                )
            if self.aggregator_kind == "ot-att" and self.reference.attention_element is None:
                raise ValueError("'ot-att' needs a reference with an attention_element")
            expected = self.feature_dim * self.reference.size
        if self.Wc.shape != (self.n_classes, expected):
            raise ValueError(
                f"classifier shape {self.Wc.shape} does not match aggregate "
                f"length {expected}"
            )

    @property
    def feature_dim(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.Wc.shape[0]

    def parameters(self) -> dict:
        """Trainable arrays by name; reference points in d x N_z layout."""
        params = {
            "W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2,
            "Wc": self.Wc, "bc": self.bc,
        }
        if self.reference is not None:
            params["Z"] = self.reference.points
            if self.aggregator_kind == "ot-att":
                params["u"] = self.reference.attention_element
        return params

    def apply_parameters(self, params: dict) -> None:
        """Install updated arrays in place of the current ones."""
        self.W1 = params["W1"]
        self.b1 = params["b1"]
        self.W2 = params["W2"]
        self.b2 = params["b2"]
        self.Wc = params["Wc"]
        self.bc = params["bc"]
        if self.reference is not None:
            att = params.get("u", self.reference.attention_element)
            self.reference = ReferenceSet(
                params["Z"], self.reference.intensities, att
            )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    optimizer_kind: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size!r}")
        if not (self.learning_rate > 0):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if self.optimizer_kind not in OPTIMIZER_KINDS:
            raise ValueError(
                f"optimizer_kind must be one of {OPTIMIZER_KINDS}, "
                f"got {self.optimizer_kind!r}"
            )


@dataclass
class GradientTape:
    """Everything one forward pass computed, pinned for the reverse sweep.

    Parameter arrays are captured by reference; the optimizer installs new
    arrays rather than mutating, so a tape stays replayable after an update
    step. ``replay`` reruns the pass from the recorded inputs and must
    reproduce ``logits`` bitwise on the same backend.
    """

    aggregator_kind: str
    config: SinkhornConfig
    obs: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray
    logits: np.ndarray
    pre1: np.ndarray
    h: np.ndarray
    X: np.ndarray
    # transport variants; F and G hold the log scaling iterate history,
    # one row per iteration including the initial row
    Zt: np.ndarray | None = None
    uatt: np.ndarray | None = None
    s_att: np.ndarray | None = None
    a: np.ndarray | None = None
    C: np.ndarray | None = None
    F: np.ndarray | None = None
    G: np.ndarray | None = None
    P: np.ndarray | None = None
    phi: np.ndarray | None = None
    # stats variant
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    sigma: np.ndarray | None = None
    agg_stats: np.ndarray | None = None

    @property
    def aggregate(self) -> np.ndarray:
        if self.aggregator_kind == "stats":
            return self.agg_stats
        return self.phi.ravel()

    def replay(self) -> np.ndarray:
        """Recompute the logits from the recorded inputs and parameters."""
        if self.aggregator_kind == "stats":
            out = kernels.toy_forward_stats(
                self.obs, self.W1, self.b1, self.W2, self.b2,
                self.Wc, self.bc, VARIANCE_FLOOR,
            )
            return out[0]
        out = kernels.toy_forward_ot(
            self.obs, self.W1, self.b1, self.W2, self.b2,
            self.Zt, self.uatt, self.aggregator_kind == "ot-att",
            self.config.epsilon, self.config.max_iterations,
            self.Wc, self.bc,
        )
        return out[0]


def init_toy_model(
    rng,
    aggregator_kind: str,
    n_classes: int = 100,
    hidden: int = 64,
    feature_dim: int = 16,
    ref_size: int = 16,
    ref_init_scale: float = 0.1,
) -> ToyModel:
    """Fresh model with scaled-Gaussian weights.

    Rectifier layers use sqrt(2/fan_in) scaling, the classifier
    1/sqrt(fan_in); biases start at zero. Reference points start at
    N(0, ref_init_scale^2) and the attention element at exactly zero, so the
    attention variant begins as the plain one. Draw order is fixed, so a
    seed pins the whole initialization.
    """
    rng = np.random.default_rng(rng)
    W1 = rng.normal(0.0, np.sqrt(2.0), hidden)
    b1 = np.zeros(hidden)
    W2 = rng.normal(0.0, np.sqrt(2.0 / hidden), (feature_dim, hidden))
    b2 = np.zeros(feature_dim)
    if aggregator_kind == "stats":
        agg_len = 2 * feature_dim
        reference = None
    else:
        agg_len = feature_dim * ref_size
        points = rng.normal(0.0, ref_init_scale, (feature_dim, ref_size))
        att = np.zeros(feature_dim) if aggregator_kind == "ot-att" else None
        reference = ReferenceSet.create(points, att)
    Wc = rng.normal(0.0, 1.0 / np.sqrt(agg_len), (n_classes, agg_len))
    bc = np.zeros(n_classes)
    return ToyModel(aggregator_kind, W1, b1, W2, b2, Wc, bc, reference)


def _ot_inputs(model: ToyModel) -> tuple:
    Zt = np.ascontiguousarray(model.reference.points.T)
    use_att = model.aggregator_kind == "ot-att"
    if use_att:
        uatt = model.reference.attention_element
    else:
        uatt = np.zeros(model.feature_dim)
    return Zt, uatt, use_att


def forward(model: ToyModel, sample, config: SinkhornConfig) -> tuple:
    """Logits and the tape needed to differentiate them.

    The transport aggregators run the scaling iteration to the fixed depth
    ``config.max_iterations``; there is no residual-based early exit here
    because the backward sweep needs a fixed-shape iterate history.
    """
    sample = _as_sample_set(sample)
    obs = sample.values
    if model.aggregator_kind == "stats":
        logits, pre1, h, X, mean, var, sigma, agg = kernels.toy_forward_stats(
            obs, model.W1, model.b1, model.W2, model.b2,
            model.Wc, model.bc, VARIANCE_FLOOR,
        )
        tape = GradientTape(
            aggregator_kind="stats", config=config, obs=obs,
            W1=model.W1, b1=model.b1, W2=model.W2, b2=model.b2,
            Wc=model.Wc, bc=model.bc, logits=logits, pre1=pre1, h=h, X=X,
            mean=mean, var=var, sigma=sigma, agg_stats=agg,
        )
    else:
        Zt, uatt, use_att = _ot_inputs(model)
        logits, pre1, h, X, s_att, a, C, F, G, P, phi = kernels.toy_forward_ot(
            obs, model.W1, model.b1, model.W2, model.b2,
            Zt, uatt, use_att, config.epsilon, config.max_iterations,
            model.Wc, model.bc,
        )
        tape = GradientTape(
            aggregator_kind=model.aggregator_kind, config=config, obs=obs,
            W1=model.W1, b1=model.b1, W2=model.W2, b2=model.b2,
            Wc=model.Wc, bc=model.bc, logits=logits, pre1=pre1, h=h, X=X,
            Zt=Zt, uatt=uatt, s_att=s_att, a=a, C=C, F=F, G=G, P=P, phi=phi,
        )
    if not np.all(np.isfinite(logits)):
        raise NumericalError(_first_nonfinite_node(tape) or "logits", "forward")
    return logits, tape


def loss(logits, label: int) -> float:
    """Softmax cross-entropy, max-subtracted."""
    logits = np.asarray(logits, dtype=np.float64)
    if not (0 <= label < logits.shape[0]):
        raise ValueError(
            f"label {label!r} out of range for {logits.shape[0]} classes"
        )
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[label])


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _loss_and_grad(logits: np.ndarray, label: int) -> tuple:
    """Cross-entropy value and its gradient on the logits, one pass."""
    z = logits - logits.max()
    e = np.exp(z)
    s = e.sum()
    g = e / s
    value = float(np.log(s) - z[label])
    g[label] -= 1.0
    return value, g


def _first_nonfinite_node(tape: GradientTape) -> str | None:
    """Name of the earliest forward node holding a non-finite value."""
    if tape.aggregator_kind == "stats":
        nodes = (
            ("pre1", tape.pre1), ("h", tape.h), ("X", tape.X),
            ("mean", tape.mean), ("var", tape.var), ("sigma", tape.sigma),
            ("aggregate", tape.agg_stats), ("logits", tape.logits),
        )
        for name, value in nodes:
            if not np.all(np.isfinite(value)):
                return name
        return None
    head = (("pre1", tape.pre1), ("h", tape.h), ("X", tape.X),
            ("s_att", tape.s_att), ("a", tape.a), ("C", tape.C))
    for name, value in head:
        if not np.all(np.isfinite(value)):
            return name
    for k in range(1, tape.F.shape[0]):
        if not np.all(np.isfinite(tape.G[k])):
            return f"g[{k}]"
        if not np.all(np.isfinite(tape.F[k])):
            return f"f[{k}]"
    tail = (("P", tape.P), ("phi", tape.phi), ("logits", tape.logits))
    for name, value in tail:
        if not np.all(np.isfinite(value)):
            return name
    return None


def _backward_arrays(tape: GradientTape, glogits: np.ndarray) -> dict:
    """Raw kernel backward dispatch; returns gradient arrays keyed by name."""
    if tape.aggregator_kind == "stats":
        gW1, gb1, gW2, gb2, gWc, gbc = kernels.toy_backward_stats(
            glogits, tape.obs, tape.pre1, tape.h, tape.X,
            tape.mean, tape.var, tape.sigma, tape.agg_stats,
            tape.W2, tape.Wc, VARIANCE_FLOOR,
        )
        return {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2, "Wc": gWc, "bc": gbc}
    use_att = tape.aggregator_kind == "ot-att"
    gW1, gb1, gW2, gb2, gZt, guatt, gWc, gbc = kernels.toy_backward_ot(
        glogits, tape.obs, tape.pre1, tape.h, tape.X, tape.a,
        tape.C, tape.F, tape.G, tape.P, tape.phi,
        tape.W2, tape.Zt, tape.uatt, use_att,
        tape.config.epsilon, tape.config.max_iterations, tape.Wc,
    )
    grads = {
        "W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2,
        "Wc": gWc, "bc": gbc, "Z": np.ascontiguousarray(gZt.T),
    }
    if use_att:
        grads["u"] = guatt
    return grads


def backward(tape: GradientTape, label: int) -> dict:
    """Parameter gradients of loss(forward(...), label), keyed by name.

    Differentiates the classifier, the displacement formula, every unrolled
    scaling iteration, the kernel matrix, the cost matrix, the attention
    softmax, and the lifter. Shapes match ``model.parameters()``.
    """
    logits = tape.logits
    if not (0 <= label < logits.shape[0]):
        raise ValueError(
            f"label {label!r} out of range for {logits.shape[0]} classes"
        )
    glogits = _softmax(logits)
    glogits[label] -= 1.0
    grads = _backward_arrays(tape, glogits)
    for name in grads:
        if not np.all(np.isfinite(grads[name])):
            node = _first_nonfinite_node(tape)
            raise NumericalError(node or f"grad[{name}]", "backward")
    return grads


def _adam_step(params, grads, state, lr):
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    new = {}
    for name, p in params.items():
        g = grads[name]
        m = state["m"][name] = ADAM_BETA1 * state["m"][name] + (1 - ADAM_BETA1) * g
        v = state["v"][name] = ADAM_BETA2 * state["v"][name] + (1 - ADAM_BETA2) * g * g
        new[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return new


def _sgd_step(params, grads, state, lr):
    return {name: p - lr * grads[name] for name, p in params.items()}


def train(
    dataset: ToyDataset,
    model: ToyModel,
    config: TrainConfig,
    progress=None,
) -> tuple:
    """Mini-batch training; returns (model, per-epoch mean loss trace).

    Shuffling is driven by config.seed alone, gradients are averaged over
    each batch in a fixed order, and parameter updates are out-of-place, so
    a (dataset, initial model, config) triple pins the result exactly on a
    given backend. The model is updated in place and also returned.
    ``progress``, if given, is called with (epoch_number, mean_loss) after
    each epoch; it has no effect on the result.
    """
    if dataset.n_classes != model.n_classes:
        raise ValueError(
            f"dataset has {dataset.n_classes} classes, model scores {model.n_classes}"
        )
    samples = np.concatenate(dataset.train_samples, axis=0).astype(np.float64)
    labels = np.repeat(np.arange(dataset.n_classes), dataset.train_per_class)
    total = samples.shape[0]
    rng = np.random.default_rng(config.seed)
    state = {"t": 0}
    if config.optimizer_kind == "adam":
        params = model.parameters()
        state["m"] = {k: np.zeros_like(v) for k, v in params.items()}
        state["v"] = {k: np.zeros_like(v) for k, v in params.items()}
        step = _adam_step
    else:
        step = _sgd_step

    trace = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(total)
        epoch_loss = 0.0
        start = 0
        while start < total:
            batch = order[start:start + config.batch_size]
            start += config.batch_size
            params = model.parameters()
            acc = {name: np.zeros_like(p) for name, p in params.items()}
            for i in batch:
                logits, tape = forward(model, samples[i], config.sinkhorn)
                value, glogits = _loss_and_grad(logits, labels[i])
                epoch_loss += value
                grads = _backward_arrays(tape, glogits)
                for name in acc:
                    acc[name] += grads[name]
            scale = 1.0 / batch.shape[0]
            for name in acc:
                acc[name] *= scale
                if not np.all(np.isfinite(acc[name])):
                    # rerun the batch with per-sample checks to name the culprit
                    for i in batch:
                        _, tape = forward(model, samples[i], config.sinkhorn)
                        backward(tape, int(labels[i]))
                    raise NumericalError(f"grad[{name}]", "backward")
            model.apply_parameters(step(params, acc, state, config.learning_rate))
        trace.append(epoch_loss / total)
        if progress is not None:
            progress(epoch, trace[-1])
    return model, trace


def evaluate(model: ToyModel, dataset: ToyDataset, config: SinkhornConfig | None = None) -> float:
    """Fraction of test samples classified correctly; argmax ties go to the
    lowest class index. ``config`` defaults to the training-time solver
    settings (fixed depth 20, unit entropy weight)."""
    if dataset.n_classes != model.n_classes:
        raise ValueError(
            f"dataset has {dataset.n_classes} classes, model scores {model.n_classes}"
        )
    if config is None:
        config = SinkhornConfig()
    correct = 0
    count = 0
    if model.aggregator_kind == "stats":
        def logits_of(obs):
            return kernels.toy_forward_stats(
                obs, model.W1, model.b1, model.W2, model.b2,
                model.Wc, model.bc, VARIANCE_FLOOR,
            )[0]
    else:
        Zt, uatt, use_att = _ot_inputs(model)

        def logits_of(obs):
            return kernels.toy_forward_ot(
                obs, model.W1, model.b1, model.W2, model.b2,
                Zt, uatt, use_att, config.epsilon, config.max_iterations,
                model.Wc, model.bc,
            )[0]
    for c, block in enumerate(dataset.test_samples):
        obs_block = block.astype(np.float64)
        for row in obs_block:
            if int(np.argmax(logits_of(row))) == c:
                correct += 1
            count += 1
    return correct / count


def save_model(model: ToyModel, path) -> None:
    """Checkpoint as an .npz archive; inverse of load_model."""
    arrays = {
        "aggregator_kind": np.asarray(model.aggregator_kind),
        "W1": model.W1, "b1": model.b1, "W2": model.W2, "b2": model.b2,
        "Wc": model.Wc, "bc": model.bc,
    }
    if model.reference is not None:
        arrays["Z"] = model.reference.points
        if model.reference.attention_element is not None:
            arrays["u"] = model.reference.attention_element
    np.savez(path, **arrays)


def load_model(path) -> ToyModel:
    with np.load(path) as data:
        kind = str(data["aggregator_kind"][()])
        reference = None
        if "Z" in data:
            att = data["u"] if "u" in data else None
            reference = ReferenceSet.create(data["Z"], att)
        return ToyModel(
            kind,
            data["W1"], data["b1"], data["W2"], data["b2"],
            data["Wc"], data["bc"],
            reference,
        )
