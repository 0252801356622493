"""Run configuration: dataclasses, canonical-JSON (de)serialization, profiles.

A run is one JSON document. Parsing is strict: unknown keys anywhere in the
tree are rejected, so typos fail fast instead of silently training with a
default. Profiles ("desk", "paper") are full TrainConfigs; a config file and
CLI flags override them field by field (flag > config file > profile).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .attacks import AttackSpec
from .data import Dataset, from_gmm, load_csv, load_idx, synth_multiclass
from .errors import ConfigError
from .gmm import GmmSpec
from .models import Arch, ConvStem
from .objectives import ObjectiveSpec
from .reweight import WeightScheme


def _check_keys(obj: dict, where: str, required: tuple, optional: tuple = ()) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(obj).__name__}")
    keys = set(obj)
    missing = set(required) - keys
    unknown = keys - set(required) - set(optional)
    if missing:
        raise ConfigError(f"{where} missing keys: {sorted(missing)}")
    if unknown:
        raise ConfigError(f"{where} has unknown keys: {sorted(unknown)}")


# -- leaf specs ----------------------------------------------------------------

_ATTACK_KEYS = ("family", "epsilon", "step_size", "iterations", "loss_mode",
                "bounds", "seed", "start_noise_scale", "spsa_samples",
                "spsa_perturb", "spsa_lr")
_SCHEME_KEYS = ("family", "alpha", "gamma", "beta", "lambda_g", "k_pgd",
                "burn_in_epoch")
_OBJECTIVE_KEYS = ("family", "trade_off", "weight_scheme", "ablation")


def attack_from_obj(obj: dict, where: str = "attack") -> AttackSpec:
    _check_keys(obj, where, ("family", "epsilon"), _ATTACK_KEYS[2:])
    kwargs = dict(obj)
    if kwargs.get("bounds") is not None:
        kwargs["bounds"] = tuple(kwargs["bounds"])
    try:
        return AttackSpec(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def attack_to_obj(spec: AttackSpec) -> dict:
    return {
        "family": spec.family.value, "epsilon": spec.epsilon,
        "step_size": spec.step_size, "iterations": spec.iterations,
        "loss_mode": spec.loss_mode.value,
        "bounds": None if spec.bounds is None else list(spec.bounds),
        "seed": spec.seed, "start_noise_scale": spec.start_noise_scale,
        "spsa_samples": spec.spsa_samples, "spsa_perturb": spec.spsa_perturb,
        "spsa_lr": spec.spsa_lr,
    }


def scheme_from_obj(obj: dict, where: str = "weight_scheme") -> WeightScheme:
    _check_keys(obj, where, ("family",), _SCHEME_KEYS[1:])
    try:
        return WeightScheme(**obj)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def scheme_to_obj(s: WeightScheme) -> dict:
    return {"family": s.family.value, "alpha": s.alpha, "gamma": s.gamma,
            "beta": s.beta, "lambda_g": s.lambda_g, "k_pgd": s.k_pgd,
            "burn_in_epoch": s.burn_in_epoch}


def objective_from_obj(obj: dict, where: str = "objective") -> ObjectiveSpec:
    _check_keys(obj, where, ("family",), _OBJECTIVE_KEYS[1:])
    kwargs = dict(obj)
    if "weight_scheme" in kwargs:
        kwargs["weight_scheme"] = scheme_from_obj(
            kwargs["weight_scheme"], f"{where}.weight_scheme"
        )
    try:
        return ObjectiveSpec(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def objective_to_obj(o: ObjectiveSpec) -> dict:
    return {"family": o.family.value, "trade_off": o.trade_off,
            "weight_scheme": scheme_to_obj(o.weight_scheme),
            "ablation": o.ablation.value}


# -- optimizer / model / data --------------------------------------------------


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple = (75, 90)
    decay_factor: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "milestones",
                           tuple(int(m) for m in self.milestones))
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must exceed 1, got {self.decay_factor}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must increase strictly: {self.milestones}")


_OPTIM_KEYS = ("base_lr", "momentum", "weight_decay", "milestones", "decay_factor")


@dataclass(frozen=True)
class ModelConfig:
    """Dense widths plus an optional single conv stem (needs image geometry)."""

    hidden: tuple = (64, 64)
    conv: ConvStem | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden widths must be positive, got {self.hidden}")

    def arch(self, input_dim: int, num_classes: int) -> Arch:
        if self.conv is not None:
            if self.conv.height * self.conv.width != input_dim:
                raise ConfigError(
                    f"conv stem expects {self.conv.height}x{self.conv.width}"
                    f"={self.conv.height * self.conv.width} inputs, data has {input_dim}"
                )
            return Arch((self.conv.out_dim, *self.hidden, num_classes), self.conv)
        return Arch((input_dim, *self.hidden, num_classes))


_CONV_KEYS = ("height", "width", "filters", "kernel_size")

_DATA_KEYS: dict[str, tuple[tuple, tuple]] = {
    # kind -> (required, optional)
    "synth": (("num_classes", "dim", "variances", "separation", "per_class_n"),
              ("seed", "eval_per_class_n", "eval_seed")),
    "gmm": (("d", "eta", "sigma", "k_var", "n"), ("seed", "eval_n", "eval_seed")),
    "idx": (("images", "labels"), ("eval_images", "eval_labels")),
    "csv": (("path",), ("eval_path",)),
}


@dataclass(frozen=True)
class DataSource:
    """Where training (and optionally held-out) data comes from.

    kind is one of synth/gmm/idx/csv; params holds that kind's fields,
    validated against _DATA_KEYS. Synthetic eval splits draw from an
    independent stream (eval_seed, default seed+1).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _DATA_KEYS:
            raise ConfigError(
                f"dataset kind must be one of {sorted(_DATA_KEYS)}, got {self.kind!r}"
            )
        required, optional = _DATA_KEYS[self.kind]
        _check_keys(self.params, f"dataset[{self.kind}]", required, optional)
        if self.kind == "idx":
            have = [k for k in ("eval_images", "eval_labels") if k in self.params]
            if len(have) == 1:
                raise ConfigError("idx eval split needs both eval_images and eval_labels")

    def load(self) -> tuple[Dataset, Dataset | None]:
        p = self.params
        if self.kind == "synth":
            seed = int(p.get("seed", 0))
            train = synth_multiclass(p["num_classes"], p["per_class_n"],
                                     p["variances"], p["separation"],
                                     p["dim"], seed)
            n_eval = int(p.get("eval_per_class_n", 0))
            if n_eval <= 0:
                return train, None
            eval_set = synth_multiclass(p["num_classes"], n_eval,
                                        p["variances"], p["separation"],
                                        p["dim"], int(p.get("eval_seed", seed + 1)))
            return train, eval_set
        if self.kind == "gmm":
            spec = GmmSpec(d=int(p["d"]), eta=p["eta"], sigma=p["sigma"],
                           k_var=p["k_var"])
            seed = int(p.get("seed", 0))
            train = from_gmm(spec, int(p["n"]), seed)
            n_eval = int(p.get("eval_n", 0))
            if n_eval <= 0:
                return train, None
            return train, from_gmm(spec, n_eval, int(p.get("eval_seed", seed + 1)))
        if self.kind == "idx":
            train = load_idx(p["images"], p["labels"])
            if "eval_images" in p:
                return train, load_idx(p["eval_images"], p["eval_labels"])
            return train, None
        train = load_csv(p["path"])
        if p.get("eval_path"):
            return train, load_csv(p["eval_path"])
        return train, None

    def to_obj(self) -> dict:
        return {"kind": self.kind, **self.params}


def data_from_obj(obj: dict) -> DataSource:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise ConfigError("dataset must be an object with a 'kind' key")
    params = {k: v for k, v in obj.items() if k != "kind"}
    return DataSource(obj["kind"], params)


# -- the run config ------------------------------------------------------------

_TRAIN_KEYS = ("seed", "epochs", "batch_size", "eval_every", "log_weights_every",
               "optimizer", "objective", "attack_train", "attack_eval", "model",
               "dataset")


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveSpec
    attack_train: AttackSpec
    attack_eval: tuple
    dataset: DataSource
    optimizer: OptimConfig = OptimConfig()
    model: ModelConfig = ModelConfig()
    epochs: int = 115
    batch_size: int = 128
    seed: int = 0
    eval_every: int = 5
    log_weights_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "attack_eval", tuple(self.attack_eval))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1 or self.log_weights_every < 1:
            raise ConfigError("logging cadences must be >= 1")
        if self.optimizer.milestones and self.optimizer.milestones[-1] >= self.epochs:
            raise ConfigError(
                f"milestones {self.optimizer.milestones} must all be < epochs "
                f"{self.epochs}"
            )

    def arch(self, train_set: Dataset) -> Arch:
        return self.model.arch(train_set.dim, train_set.num_classes)


def config_from_obj(obj: dict) -> TrainConfig:
    _check_keys(obj, "config", ("objective", "attack_train", "attack_eval", "dataset"),
                tuple(k for k in _TRAIN_KEYS
                      if k not in ("objective", "attack_train", "attack_eval", "dataset")))
    opt_obj = obj.get("optimizer", {})
    _check_keys(opt_obj, "optimizer", (), _OPTIM_KEYS)
    if "milestones" in opt_obj:
        opt_obj = dict(opt_obj, milestones=tuple(opt_obj["milestones"]))
    model_obj = obj.get("model", {})
    _check_keys(model_obj, "model", (), ("hidden", "conv"))
    conv = None
    if model_obj.get("conv") is not None:
        _check_keys(model_obj["conv"], "model.conv", _CONV_KEYS)
        conv = ConvStem(**model_obj["conv"])
    if not isinstance(obj["attack_eval"], list):
        raise ConfigError("attack_eval must be a list of attack objects")
    return TrainConfig(
        objective=objective_from_obj(obj["objective"]),
        attack_train=attack_from_obj(obj["attack_train"], "attack_train"),
        attack_eval=tuple(attack_from_obj(a, f"attack_eval[{i}]")
                          for i, a in enumerate(obj["attack_eval"])),
        dataset=data_from_obj(obj["dataset"]),
        optimizer=OptimConfig(**opt_obj),
        model=ModelConfig(hidden=tuple(model_obj.get("hidden", (64, 64))), conv=conv),
        epochs=int(obj.get("epochs", 115)),
        batch_size=int(obj.get("batch_size", 128)),
        seed=int(obj.get("seed", 0)),
        eval_every=int(obj.get("eval_every", 5)),
        log_weights_every=int(obj.get("log_weights_every", 1)),
    )


def config_to_obj(c: TrainConfig) -> dict:
    conv = c.model.conv
    return {
        "seed": c.seed, "epochs": c.epochs, "batch_size": c.batch_size,
        "eval_every": c.eval_every, "log_weights_every": c.log_weights_every,
        "optimizer": {"base_lr": c.optimizer.base_lr,
                      "momentum": c.optimizer.momentum,
                      "weight_decay": c.optimizer.weight_decay,
                      "milestones": list(c.optimizer.milestones),
                      "decay_factor": c.optimizer.decay_factor},
        "objective": objective_to_obj(c.objective),
        "attack_train": attack_to_obj(c.attack_train),
        "attack_eval": [attack_to_obj(a) for a in c.attack_eval],
        "model": {"hidden": list(c.model.hidden),
                  "conv": None if conv is None else
                  {"height": conv.height, "width": conv.width,
                   "filters": conv.filters, "kernel_size": conv.kernel_size}},
        "dataset": c.dataset.to_obj(),
    }


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def load_config_file(path) -> dict:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a single JSON object")
    return obj


def deep_merge(base: dict, override: dict) -> dict:
    """Dicts merge recursively; lists and scalars replace wholesale."""
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def set_dotted(obj: dict, path: str, value) -> None:
    """Set config[a][b][c] = value for path 'a.b.c'; integer parts index lists."""
    parts = path.split(".")
    cur = obj
    for i, part in enumerate(parts[:-1]):
        if isinstance(cur, list):
            try:
                key = int(part)
            except ValueError:
                raise ConfigError(
                    f"--set {path}: bad list index {part!r}"
                ) from None
        else:
            key = part
        try:
            nxt = cur[key]
        except (KeyError, IndexError, TypeError):
            nxt = None
        if not isinstance(nxt, (dict, list)):
            if isinstance(cur, list):
                raise ConfigError(f"--set {path}: bad list index {part!r}")
            cur[key] = {}
            nxt = cur[key]
        cur = nxt
    last = parts[-1]
    if isinstance(cur, list):
        try:
            cur[int(last)] = value
        except (ValueError, IndexError) as e:
            raise ConfigError(f"--set {path}: {e}") from e
    else:
        cur[last] = value


# -- named profiles ------------------------------------------------------------


def desk_profile() -> dict:
    """Small 3-class mixture that trains in seconds on a laptop.

    The high-variance third class is the designated vulnerable class, and
    the separation/epsilon pair is deliberately tight enough that every
    class keeps a real error rate: that is what makes the vulnerability
    signal in the weight logs stand clear of sampling noise.
    """
    return {
        "seed": 0,
        "epochs": 30,
        "batch_size": 64,
        "eval_every": 5,
        "log_weights_every": 1,
        "optimizer": {"base_lr": 0.01, "momentum": 0.9, "weight_decay": 0.0005,
                      "milestones": [20, 25], "decay_factor": 10.0},
        "objective": {"family": "VIR_AT", "trade_off": 5.0, "ablation": "FULL",
                      "weight_scheme": {"family": "VIR", "alpha": 7.0,
                                        "gamma": 10.0, "beta": 0.007,
                                        "lambda_g": -1.0, "k_pgd": 10,
                                        "burn_in_epoch": 18}},
        "attack_train": {"family": "PGD", "epsilon": 0.75, "step_size": 0.1875,
                         "iterations": 10, "loss_mode": "CE", "bounds": None,
                         "seed": 0, "start_noise_scale": 0.001},
        "attack_eval": [
            {"family": "PGD", "epsilon": 0.75, "step_size": 0.1875,
             "iterations": 20, "loss_mode": "CE", "seed": 1234},
            {"family": "FGSM", "epsilon": 0.75, "seed": 1234},
        ],
        "model": {"hidden": [64, 64], "conv": None},
        "dataset": {"kind": "synth", "num_classes": 3, "dim": 8,
                    "variances": [1.0, 1.0, 4.0], "separation": 4.0,
                    "per_class_n": 200, "seed": 0,
                    "eval_per_class_n": 200},
    }


def paper_profile() -> dict:
    """The full-scale 115-epoch image recipe, for IDX-format grayscale data.

    Expects 28x28 inputs; point dataset.images/labels at real files before
    running. Epsilon and step sizes are in [0,1] pixel units (8/255, 2/255).
    """
    return {
        "seed": 0,
        "epochs": 115,
        "batch_size": 128,
        "eval_every": 5,
        "log_weights_every": 5,
        "optimizer": {"base_lr": 0.01, "momentum": 0.9, "weight_decay": 0.0035,
                      "milestones": [75, 90], "decay_factor": 10.0},
        "objective": {"family": "VIR_AT", "trade_off": 5.0, "ablation": "FULL",
                      "weight_scheme": {"family": "VIR", "alpha": 7.0,
                                        "gamma": 10.0, "beta": 0.007,
                                        "lambda_g": -1.0, "k_pgd": 10,
                                        "burn_in_epoch": 75}},
        "attack_train": {"family": "PGD", "epsilon": 8 / 255,
                         "step_size": 2 / 255, "iterations": 10,
                         "loss_mode": "CE", "bounds": [0.0, 1.0], "seed": 0,
                         "start_noise_scale": 0.001},
        "attack_eval": [
            {"family": "PGD", "epsilon": 8 / 255, "step_size": 1 / 255,
             "iterations": 100, "loss_mode": "CE", "bounds": [0.0, 1.0],
             "seed": 1234},
            {"family": "CW_PGD", "epsilon": 8 / 255, "step_size": 2 / 255,
             "iterations": 20, "loss_mode": "CW_MARGIN", "bounds": [0.0, 1.0],
             "seed": 1234},
            {"family": "FGSM", "epsilon": 8 / 255, "bounds": [0.0, 1.0],
             "seed": 1234},
            {"family": "SPSA", "epsilon": 8 / 255, "iterations": 100,
             "loss_mode": "CE", "bounds": [0.0, 1.0], "seed": 1234,
             "spsa_samples": 256, "spsa_perturb": 0.001, "spsa_lr": 0.01},
        ],
        "model": {"hidden": [128, 64],
                  "conv": {"height": 28, "width": 28, "filters": 8,
                           "kernel_size": 5}},
        "dataset": {"kind": "idx", "images": "train-images-idx3-ubyte",
                    "labels": "train-labels-idx1-ubyte"},
    }


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def resolve_config(profile: str | None = None, config_path=None,
                   overrides: list[tuple[str, object]] | None = None) -> TrainConfig:
    """profile defaults <- config file <- dotted overrides, then validate."""
    obj = PROFILES.get(profile or "desk")
    if (profile or "desk") not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; have {sorted(PROFILES)}")
    obj = obj()
    if config_path is not None:
        obj = deep_merge(obj, load_config_file(config_path))
    for path, value in overrides or []:
        set_dotted(obj, path, value)
    return config_from_obj(obj)
