"""
models.py — Petits ConvNets de classification sur cartes FD-MFCC et format des snapshots.

Architecture (famille "convnet") :
  depth x [Conv 3x3 same -> ReLU -> AvgPool 2] -> moyenne globale -> Linear(width, K)

Les paramètres vivent dans UN vecteur plat float32, dans l'ordre :
  conv0.weight (O, C, 3, 3), conv0.bias (O,), conv1.weight, ..., head.weight (width, K), head.bias (K,)
Ce vecteur plat est ce que comparent les trajectoires (perte de matching) et
ce qu'écrivent les checkpoints.

Fichier checkpoint / trajectoire :
  une ligne d'en-tête JSON (clés triées) terminée par "\\n", puis les
  vecteurs float32 little-endian concaténés.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import tensor_autodiff as ad
from errors import ArtifactFormatError, ParameterError, ShapeError
from tensor_autodiff import Tensor

logger = logging.getLogger(__name__)

KERNEL = 3
POOL = 2
FAMILIES = ("convnet",)
_ARCH_RE = re.compile(r"^(\w+)-d(\d+)-w(\d+)-(\w+)-(\w+)-(\d+)x(\d+)x(\d+)-k(\d+)$")


# ============================================================
# Types
# ============================================================

@dataclass(frozen=True)
class ArchDescriptor:
    depth: int
    width: int
    input_shape: tuple[int, int, int]
    n_classes: int
    family: str = "convnet"
    pooling: str = "avg"
    activation: str = "relu"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"Famille d'architecture non supportée: {self.family!r}")
        if self.pooling != "avg" or self.activation != "relu":
            raise ParameterError(f"Seuls pooling=avg et activation=relu sont supportés ({self.pooling}, {self.activation})")
        if self.depth < 1 or self.width < 1 or self.n_classes < 2:
            raise ParameterError(
                f"Architecture invalide: depth={self.depth}, width={self.width}, n_classes={self.n_classes}"
            )
        _, h, w = self.input_shape
        if h // POOL**self.depth < 1 or w // POOL**self.depth < 1:
            raise ParameterError(
                f"Entrée {self.input_shape} trop petite pour {self.depth} blocs de pooling {POOL}x{POOL}"
            )

    def canonical(self) -> str:
        c, h, w = self.input_shape
        return (f"{self.family}-d{self.depth}-w{self.width}-{self.pooling}-{self.activation}"
                f"-{c}x{h}x{w}-k{self.n_classes}")

    @classmethod
    def from_string(cls, text: str) -> "ArchDescriptor":
        m = _ARCH_RE.match(text.strip())
        if not m:
            raise ParameterError(f"Descripteur d'architecture illisible: {text!r}")
        family, depth, width, pooling, activation, c, h, w, k = m.groups()
        return cls(depth=int(depth), width=int(width), input_shape=(int(c), int(h), int(w)),
                   n_classes=int(k), family=family, pooling=pooling, activation=activation)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        in_ch = self.input_shape[0]
        for i in range(self.depth):
            shapes.append((f"conv{i}.weight", (self.width, in_ch, KERNEL, KERNEL)))
            shapes.append((f"conv{i}.bias", (self.width,)))
            in_ch = self.width
        shapes.append(("head.weight", (self.width, self.n_classes)))
        shapes.append(("head.bias", (self.n_classes,)))
        return shapes

    def layer_slices(self) -> list[tuple[str, int, int, tuple[int, ...]]]:
        """(nom, début, fin, forme) de chaque tenseur dans le vecteur plat."""
        out, offset = [], 0
        for name, shape in self.layer_shapes():
            size = int(np.prod(shape))
            out.append((name, offset, offset + size, shape))
            offset += size
        return out

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layer_shapes())


@dataclass
class ParamVector:
    flat: np.ndarray
    arch: ArchDescriptor
    epoch_tag: int = 0

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float32).reshape(-1)
        if self.flat.shape[0] != self.arch.param_count:
            raise ShapeError(
                f"ParamVector: {self.flat.shape[0]} valeurs, {self.arch.param_count} attendues pour {self.arch.canonical()}"
            )


@dataclass
class Trajectory:
    arch: ArchDescriptor
    snapshots: list[ParamVector] = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.snapshots)

    def __getitem__(self, epoch: int) -> ParamVector:
        return self.snapshots[epoch]


def arch_for(depth: int, width: int, rows: int, cols: int, n_classes: int) -> ArchDescriptor:
    return ArchDescriptor(depth=depth, width=width, input_shape=(1, rows, cols), n_classes=n_classes)


# ============================================================
# Construction / forward
# ============================================================

def build(arch: ArchDescriptor, seed: int) -> ParamVector:
    """Init Kaiming-uniforme (borne sqrt(6 / fan_in)) des poids, biais nuls."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in arch.layer_shapes():
        if name.endswith(".bias"):
            parts.append(np.zeros(shape))
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        parts.append(rng.uniform(-bound, bound, size=shape))
    flat = np.concatenate([p.reshape(-1) for p in parts]).astype(np.float32)
    return ParamVector(flat=flat, arch=arch, epoch_tag=0)


def split_layers(flat, arch: ArchDescriptor) -> list:
    """Découpe un vecteur plat (Tensor ou ndarray) en tenseurs par couche, dans l'ordre du layout."""
    if isinstance(flat, Tensor):
        return [ad.reshape(ad.slice_flat(flat, start, stop), shape) for _, start, stop, shape in arch.layer_slices()]
    flat = np.asarray(flat).reshape(-1)
    return [flat[start:stop].reshape(shape) for _, start, stop, shape in arch.layer_slices()]


def forward(params, arch: ArchDescriptor, batch) -> Tensor:
    """
    Logits (B, K). `params` : ParamVector, ndarray plat ou Tensor plat (nœud du graphe,
    cas des étapes déroulées de la distillation).
    """
    if isinstance(params, ParamVector):
        params = params.flat
    flat = params if isinstance(params, Tensor) else Tensor(params)
    if flat.shape != (arch.param_count,):
        raise ShapeError(f"forward: vecteur de {flat.shape}, ({arch.param_count},) attendu")

    batch = ad.as_tensor(batch)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(arch.input_shape):
        raise ShapeError(f"forward: batch {batch.shape} incompatible avec l'entrée (B, {arch.input_shape})")

    layers = split_layers(flat, arch)
    h = batch
    for i in range(arch.depth):
        weight, bias = layers[2 * i], layers[2 * i + 1]
        h = ad.conv2d(h, weight, bias, padding="same")
        h = ad.relu(h)
        h = ad.avg_pool2d(h, POOL)
    pooled = ad.mean(h, axis=(2, 3))
    return ad.add(ad.matmul(pooled, layers[-2]), layers[-1])


def loss_on(flat, arch: ArchDescriptor, x, y) -> Tensor:
    return ad.cross_entropy(forward(flat, arch, x), y)


def predict(params, arch: ArchDescriptor, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    with ad.no_grad():
        out = [forward(params, arch, x[i : i + batch_size]).data.argmax(axis=1)
               for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(params, arch: ArchDescriptor, x: np.ndarray, y: np.ndarray) -> float:
    if x.shape[0] == 0:
        raise ParameterError("evaluate_accuracy: jeu de test vide")
    return float(np.mean(predict(params, arch, x) == np.asarray(y)))


# ============================================================
# Entraînement
# ============================================================

def sgd_epoch(flat: np.ndarray, arch: ArchDescriptor, x: np.ndarray, y: np.ndarray,
              lr: float, batch_size: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Une époque de SGD sans momentum ; renvoie (nouveau vecteur, perte moyenne)."""
    n = x.shape[0]
    bs = n if batch_size <= 0 else min(batch_size, n)
    order = rng.permutation(n)
    losses = []
    for start in range(0, n, bs):
        idx = order[start : start + bs]
        theta = Tensor(flat, requires_grad=True)
        loss = loss_on(theta, arch, x[idx], y[idx])
        (g,) = ad.grad(loss, [theta])
        flat = (flat - lr * g.data).astype(flat.dtype)
        losses.append(loss.item())
    return flat, float(np.mean(losses))


def train_epochs(params: ParamVector, x: np.ndarray, y: np.ndarray, epochs: int, lr: float,
                 batch_size: int, seed: int) -> Trajectory:
    """
    SGD cross-entropy, mélange par époque tiré de `seed`.
    Snapshot 0 = initialisation, puis un snapshot après chaque époque (epoch_tag = époque).
    """
    arch = params.arch
    if x.shape[0] == 0:
        raise ParameterError("train_epochs: dataset vide")
    y = np.asarray(y, dtype=np.int64)
    if y.min() < 0 or y.max() >= arch.n_classes:
        raise ParameterError(f"train_epochs: labels hors de [0, {arch.n_classes})")

    rng = np.random.default_rng(seed)
    flat = params.flat.copy()
    snapshots = [ParamVector(flat=flat.copy(), arch=arch, epoch_tag=0)]
    for epoch in range(1, epochs + 1):
        flat, loss = sgd_epoch(flat, arch, x, y, lr, batch_size, rng)
        snapshots.append(ParamVector(flat=flat.copy(), arch=arch, epoch_tag=epoch))
        logger.debug(f"Époque {epoch}/{epochs}: perte {loss:.4f}")
    return Trajectory(arch=arch, snapshots=snapshots, seed=seed)


def train_flat(flat: np.ndarray, arch: ArchDescriptor, x: np.ndarray, y: np.ndarray, epochs: int,
               lr: float, batch_size: int, seed: int) -> np.ndarray:
    """Comme train_epochs sans conserver les snapshots (évaluation)."""
    rng = np.random.default_rng(seed)
    flat = np.asarray(flat, dtype=np.float32).copy()
    for _ in range(epochs):
        flat, _ = sgd_epoch(flat, arch, x, y, lr, batch_size, rng)
    return flat


# ============================================================
# Fichiers
# ============================================================

def _write_blob(path: Path, header: dict, arrays: list[np.ndarray]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    path.write_bytes(head + b"".join(a.astype("<f4").tobytes() for a in arrays))
    return path


def _read_blob(path: Path) -> tuple[dict, np.ndarray]:
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise ArtifactFormatError(f"{path.name}: en-tête JSON absent")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactFormatError(f"{path.name}: en-tête JSON invalide ({e})")
    payload = raw[newline + 1 :]
    if len(payload) % 4:
        raise ArtifactFormatError(f"{path.name}: payload de {len(payload)} octets, non multiple de 4")
    return header, np.frombuffer(payload, dtype="<f4").astype(np.float32)


def save_checkpoint(params: ParamVector, path: str | Path) -> Path:
    header = {"arch": params.arch.canonical(), "epoch_tag": params.epoch_tag, "param_count": params.arch.param_count}
    return _write_blob(Path(path), header, [params.flat])


def load_checkpoint(path: str | Path) -> ParamVector:
    path = Path(path)
    header, data = _read_blob(path)
    arch = ArchDescriptor.from_string(header["arch"])
    if data.shape[0] != header.get("param_count") or data.shape[0] != arch.param_count:
        raise ArtifactFormatError(f"{path.name}: {data.shape[0]} paramètres, {arch.param_count} attendus")
    return ParamVector(flat=data, arch=arch, epoch_tag=int(header["epoch_tag"]))


def save_trajectory(traj: Trajectory, path: str | Path, config: str = "") -> Path:
    header = {
        "arch": traj.arch.canonical(),
        "config": config,
        "epoch_tags": [p.epoch_tag for p in traj.snapshots],
        "param_count": traj.arch.param_count,
        "seed": traj.seed,
    }
    return _write_blob(Path(path), header, [p.flat for p in traj.snapshots])


def load_trajectory(path: str | Path) -> Trajectory:
    path = Path(path)
    header, data = _read_blob(path)
    try:
        arch = ArchDescriptor.from_string(header["arch"])
        tags = [int(t) for t in header["epoch_tags"]]
    except KeyError as e:
        raise ArtifactFormatError(f"{path.name}: clé d'en-tête manquante {e}")
    n = arch.param_count
    if data.shape[0] != n * len(tags):
        raise ArtifactFormatError(f"{path.name}: {data.shape[0]} valeurs, {n * len(tags)} attendues")
    snapshots = [ParamVector(flat=data[i * n : (i + 1) * n], arch=arch, epoch_tag=tag) for i, tag in enumerate(tags)]
    return Trajectory(arch=arch, snapshots=snapshots, seed=int(header.get("seed", 0)))


def trajectory_config(path: str | Path) -> str:
    """RunConfig canonique embarquée dans l'en-tête d'un fichier trajectoire."""
    header, _ = _read_blob(Path(path))
    return header.get("config", "")
