"""
tensor_autodiff.py — Différentiation automatique en mode inverse sur tenseurs numpy denses.

Deux usages :
  1. entraîner les petits ConvNets (gradient d'ordre 1, create_graph=False)
  2. différencier la perte de matching de trajectoires à travers N pas de SGD
     déroulés, par rapport aux features distillées et au learning rate α
     (create_graph=True : les règles backward sont elles-mêmes écrites avec
     les primitives, donc enregistrées sur le tape)

Chaque primitive produit un Tensor portant un Node (parents, règle vjp, numéro
d'ordre sur le tape). grad() parcourt les nodes atteignables en ordre inverse
strict de l'enregistrement forward ; les gradients s'accumulent par addition.

Les tenseurs passés dans `wrt` sont traités comme des entrées : le parcours ne
remonte pas au-delà d'eux.

Stockage float32 par défaut ; `precision(np.float64)` active un mode float64
pour les vérifications par différences finies.
"""

import contextlib
import itertools
import logging
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ContractError, ShapeError

logger = logging.getLogger(__name__)


# ============================================================
# Tape (état par thread)
# ============================================================

class Tape(threading.local):
    """Compteur d'enregistrement + mode grad + précision, confinés au thread courant."""

    def __init__(self):
        self.enabled = True
        self.dtype = np.float32
        self._counter = itertools.count()

    def next_seq(self) -> int:
        return next(self._counter)


_tape = Tape()


@contextlib.contextmanager
def no_grad():
    previous = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = previous


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    previous = _tape.enabled
    _tape.enabled = enabled
    try:
        yield
    finally:
        _tape.enabled = previous


@contextlib.contextmanager
def precision(dtype):
    """Change la précision de stockage des Tensors créés dans le bloc (thread courant)."""
    previous = _tape.dtype
    _tape.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _tape.dtype = previous


def default_dtype():
    return _tape.dtype


# ============================================================
# Tensor / Node
# ============================================================

class Node:
    __slots__ = ("op", "parents", "vjp", "seq")

    def __init__(self, op: str, parents: tuple, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.seq = _tape.next_seq()


class Tensor:
    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_tape.dtype)
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        op = self.node.op if self.node else "leaf"
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"

    # Opérateurs
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data, parents: tuple, vjp) -> Tensor:
    """Crée le Tensor de sortie ; enregistre un Node si le grad est actif et qu'un parent l'exige."""
    out = Tensor(data)
    if _tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, vjp)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: formes incompatibles {a.shape} et {b.shape}")


# ============================================================
# Primitives élémentaires
# ============================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g, out: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g, out: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g, out: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g, out: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def vjp(g, out):
        ga = sum_to(div(g, b), a.shape)
        gb = sum_to(neg(div(mul(g, out), b)), b.shape)
        return ga, gb

    return _record("div", a.data / b.data, (a, b), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _record("exp", np.exp(a.data), (a,), lambda g, out: (mul(g, out),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return _record("sqrt", np.sqrt(a.data), (a,), lambda g, out: (div(g, mul(out, 2.0)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor(a.data > 0)
    return _record("relu", np.maximum(a.data, 0), (a,), lambda g, out: (mul(g, mask),))


def matmul(a, b) -> Tensor:
    """Produit matriciel 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: formes incompatibles {a.shape} et {b.shape}")
    return _record("matmul", a.data @ b.data, (a, b),
                   lambda g, out: (matmul(g, transpose(b)), matmul(transpose(a), g)))


# ============================================================
# Primitives de forme
# ============================================================

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: impossible de passer de {a.shape} à {shape}")
    return _record("reshape", data, (a,), lambda g, out: (reshape(g, a.shape),))


def flatten(a, start_dim: int = 1) -> Tensor:
    a = as_tensor(a)
    return reshape(a, a.shape[:start_dim] + (-1,))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g, out: (transpose(g, inverse),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} ne se diffuse pas vers {shape}")
    return _record("broadcast_to", np.ascontiguousarray(data), (a,),
                   lambda g, out: (sum_to(g, a.shape),))


def sum_to(a, shape) -> Tensor:
    """Réduit par somme vers `shape` (adjoint de broadcast_to)."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: {a.shape} ne se réduit pas vers {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1
    )
    data = a.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    if data.shape != shape:
        raise ShapeError(f"sum_to: {a.shape} ne se réduit pas vers {shape}")
    return _record("sum_to", data, (a,), lambda g, out: (broadcast_to(g, a.shape),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    kept = a.data.sum(axis=axis, keepdims=True).shape

    def vjp(g, out):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _record("sum", data, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def slice_flat(a, start: int, stop: int) -> Tensor:
    """a[start:stop] sur un vecteur 1-D."""
    a = as_tensor(a)
    if a.ndim != 1 or not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"slice_flat: [{start}:{stop}] hors de la forme {a.shape}")
    total = a.shape[0]
    return _record("slice_flat", a.data[start:stop].copy(), (a,),
                   lambda g, out: (pad_flat(g, start, total),))


def pad_flat(g, start: int, total: int) -> Tensor:
    """Adjoint de slice_flat : replace g dans un vecteur nul de longueur total."""
    g = as_tensor(g)
    n = g.shape[0]
    data = np.zeros(total, dtype=g.data.dtype)
    data[start : start + n] = g.data
    return _record("pad_flat", data, (g,), lambda h, out: (slice_flat(h, start, start + n),))


def take_rows(a, index) -> Tensor:
    """a[index] le long de l'axe 0."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    return _record("take_rows", a.data[index], (a,), lambda g, out: (put_rows(g, index, n),))


def put_rows(g, index, n: int) -> Tensor:
    """Adjoint de take_rows : scatter-add des lignes de g aux positions index."""
    g = as_tensor(g)
    data = np.zeros((n,) + g.shape[1:], dtype=g.data.dtype)
    np.add.at(data, index, g.data)
    return _record("put_rows", data, (g,), lambda h, out: (take_rows(h, index),))


# ============================================================
# Convolution / pooling
# ============================================================

def _conv_geometry(shape, kh, kw, stride, pad):
    _, _, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: entrée {shape} trop petite pour un noyau {kh}x{kw}")
    return ho, wo


def im2col(x, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """(B, C, H, W) -> (B*Ho*Wo, C*kh*kw), colonnes ordonnées (c, i, j)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col: entrée 4-D attendue, reçu {x.shape}")
    b, c = x.shape[:2]
    ho, wo = _conv_geometry(x.shape, kh, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    shape = x.shape
    return _record("im2col", np.ascontiguousarray(cols), (x,),
                   lambda g, out: (col2im(g, shape, kh, kw, stride, pad),))


def col2im(g, shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint de im2col : accumule les patches dans une image (B, C, H, W)."""
    g = as_tensor(g)
    b, c, h, w = shape
    ho, wo = _conv_geometry(shape, kh, kw, stride, pad)
    patches = g.data.reshape(b, ho, wo, c, kh, kw)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=g.data.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    data = xp[:, :, pad : pad + h, pad : pad + w]
    return _record("col2im", np.ascontiguousarray(data), (g,),
                   lambda h_, out: (im2col(h_, kh, kw, stride, pad),))


def conv2d(x, weight, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """
    Convolution 2-D (corrélation) : x (B, C, H, W), weight (O, C, kh, kw), bias (O,).
    padding 'same' (noyaux impairs, stride 1 => même H, W) ou 'valid'.
    Composée de im2col + matmul, donc différentiable à tous les ordres utiles.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: formes incompatibles {x.shape} et {weight.shape}")
    if padding not in ("same", "valid"):
        raise ShapeError(f"conv2d: padding inconnu {padding!r}")
    o, c, kh, kw = weight.shape
    pad = (kh - 1) // 2 if padding == "same" else 0
    b = x.shape[0]
    ho, wo = _conv_geometry(x.shape, kh, kw, stride, pad)

    cols = im2col(x, kh, kw, stride, pad)
    out = matmul(cols, transpose(reshape(weight, (o, c * kh * kw))))
    out = transpose(reshape(out, (b, ho, wo, o)), (0, 3, 1, 2))
    if bias is not None:
        out = add(out, reshape(bias, (1, o, 1, 1)))
    return out


def avg_pool2d(x, k: int = 2) -> Tensor:
    """Moyenne sur des fenêtres k x k sans recouvrement (bords tronqués)."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"avg_pool2d: entrée {x.shape} plus petite que la fenêtre {k}")
    data = x.data[:, :, : ho * k, : wo * k].reshape(b, c, ho, k, wo, k).mean(axis=(3, 5))
    shape = x.shape
    return _record("avg_pool2d", data, (x,), lambda g, out: (avg_unpool2d(g, shape, k),))


def avg_unpool2d(g, shape, k: int = 2) -> Tensor:
    """Adjoint de avg_pool2d : répartit g / k² sur chaque fenêtre, zéro sur les bords tronqués."""
    g = as_tensor(g)
    b, c, h, w = shape
    ho, wo = g.shape[2], g.shape[3]
    data = np.zeros(shape, dtype=g.data.dtype)
    data[:, :, : ho * k, : wo * k] = np.repeat(np.repeat(g.data, k, axis=2), k, axis=3) / (k * k)
    return _record("avg_unpool2d", data, (g,), lambda h_, out: (avg_pool2d(h_, k),))


# ============================================================
# Pertes
# ============================================================

def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g, out):
        return (sub(g, mul(exp(out), sum(g, axis=axis, keepdims=True))),)

    return _record("log_softmax", data, (a,), vjp)


def nll_loss(log_probs, labels) -> Tensor:
    """Moyenne de -log p[label] sur le batch ; log_probs (B, K)."""
    log_probs = as_tensor(log_probs)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = log_probs.shape
    if labels.shape != (b,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ShapeError(f"nll_loss: labels {labels.shape} incompatibles avec log_probs {log_probs.shape}")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    return mul(sum(mul(log_probs, Tensor(onehot))), -1.0 / b)


def cross_entropy(logits, labels) -> Tensor:
    return nll_loss(log_softmax(logits, axis=-1), labels)


def sq_norm(a) -> Tensor:
    """||a||² (somme des carrés de toutes les entrées)."""
    a = as_tensor(a)
    return _record("sq_norm", np.sum(a.data * a.data), (a,), lambda g, out: (mul(a, mul(g, 2.0)),))


# ============================================================
# Gradients
# ============================================================

def _reverse_order(loss: Tensor, stop: set[int]) -> list[Tensor]:
    """Tensors à node atteignables depuis loss, triés par ordre d'enregistrement décroissant."""
    seen = set()
    found = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        found.append(t)
        if id(t) in stop:
            continue
        stack.extend(t.node.parents)
    found.sort(key=lambda t: t.node.seq, reverse=True)
    return found


def grad(loss: Tensor, wrt: list[Tensor], create_graph: bool = False) -> list[Tensor]:
    """
    Gradients exacts de `loss` (scalaire) par rapport à chaque tenseur de `wrt`.
    Un tenseur non atteignable reçoit un gradient nul.
    Avec create_graph=True, les gradients sont eux-mêmes des nœuds du graphe.
    """
    if loss.data.size != 1:
        raise ContractError(f"grad: la perte doit être scalaire, forme reçue {loss.shape}")

    stop = {id(w) for w in wrt}
    # Un wrt "intermédiaire" est traité comme une entrée : on ne descend pas sous lui
    order = [t for t in _reverse_order(loss, stop) if not (id(t) in stop and t is not loss)]
    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones_like(loss.data))}

    with _grad_mode(create_graph):
        for t in order:
            g = grads.get(id(t))
            if g is None:
                continue
            for parent, pg in zip(t.node.parents, t.node.vjp(g, t)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else add(grads[key], pg)

    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros_like(w.data)))
    return out


def sgd_step_differentiable(params: list[Tensor], loss: Tensor, lr: Tensor) -> list[Tensor]:
    """
    params - lr * dloss/dparams, en NOUVEAUX nœuds du graphe : la différentiation
    externe (features distillées, lr) traverse ce pas. Les params d'origine ne sont pas modifiés.
    """
    grads = grad(loss, params, create_graph=True)
    return [sub(p, mul(lr, g)) for p, g in zip(params, grads)]


def numerical_grad(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Différences finies centrées de fn (ndarray -> float) ; oracle des tests."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        plus = fn(x)
        x[idx] = orig - eps
        minus = fn(x)
        x[idx] = orig
        out[idx] = (plus - minus) / (2 * eps)
    return out
