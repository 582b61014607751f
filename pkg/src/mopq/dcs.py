"""Deterministic single-process simulation of cross-device contrastive sampling.

``D`` data-parallel devices each encode ``N`` (query, key) pairs. Keys are
quantized with straight-through assignment. Every device then holds detached
snapshots of every other device's embeddings (``broadcast``), so each query
is normalized over the full ``D * N`` key pool while gradients stop at the
borrowed embeddings, exactly as a real all-gather of detached tensors would
behave.

Two gradient schemes are provided on top of the broadcast:

* DCS: each device computes a primary loss over its own instances plus one
  image loss per foreign device. The image loss re-computes a foreign
  instance's matching term with the differentiability inverted so that the
  host device's keys receive the gradient the primary loss had to drop.
  Summed over devices, these per-device partial gradients equal the gradient
  of the fully differentiable pooled softmax, which ``full_loss_oracle``
  computes directly for verification.
* NCS: primary losses only; gradients through borrowed keys are simply lost.

All totals are scaled by 1 / (D * N) so step sizes match the oracle's
mean-reduced loss regardless of the device count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import encoder as enc
from . import losses
from . import quantization as q
from .autograd import Array, Node, ParameterSet
from .errors import UsageError


@dataclass(frozen=True)
class ClusterConfig:
    devices: int
    batch_size: int
    seed: int = 0

    def __post_init__(self):
        if self.devices < 1 or self.batch_size < 1:
            raise UsageError("need at least one device and one instance per device")

    @property
    def pool_size(self) -> int:
        return self.devices * self.batch_size


@dataclass
class DeviceBatch:
    """One simulated device's differentiable nodes plus detached foreign views."""

    device_id: int
    queries: Node                  # (N, d), differentiable
    keys: Node                     # (N, d), quantized, differentiable
    commitment: Node               # scalar, forward value exactly 0
    codes: Array                   # (N, M) uint16
    frozen: q.FrozenSte
    shared_queries: dict[int, Node] = field(default_factory=dict)
    shared_keys: dict[int, Node] = field(default_factory=dict)


def assemble_devices(query_batches: list[Array], key_batches: list[Array],
                     params: ParameterSet, enc_cfg: enc.EncoderConfig,
                     variant: q.SelectionVariant, num_books: int,
                     commitment_grad: str = "ste",
                     frozen: list[q.FrozenSte] | None = None) -> list[DeviceBatch]:
    """Encode and quantize each device's chunk inside one shared graph."""
    if len(query_batches) != len(key_batches):
        raise UsageError("query and key batches must pair up per device")
    param_nodes = enc.parameter_nodes(params)
    book_nodes = [param_nodes[f"codebook_{i}"] for i in range(num_books)]
    bilinear_nodes = ([param_nodes[f"bilinear_{i}"] for i in range(num_books)]
                      if variant.kind == "bilinear" else None)
    devices = []
    for dev_id, (xq, xk) in enumerate(zip(query_batches, key_batches)):
        queries = enc.encode_graph(xq, param_nodes, enc_cfg)
        raw_keys = enc.encode_graph(xk, param_nodes, enc_cfg)
        quant = q.quantize_ste(raw_keys, book_nodes, variant,
                               bilinear_nodes=bilinear_nodes,
                               commitment_grad=commitment_grad,
                               frozen=None if frozen is None else frozen[dev_id])
        devices.append(DeviceBatch(
            device_id=dev_id, queries=queries, keys=quant.node,
            commitment=quant.commitment, codes=quant.codes, frozen=quant.frozen))
    return broadcast(devices)


def broadcast(devices: list[DeviceBatch]) -> list[DeviceBatch]:
    """Give every device detached views of every other device's embeddings."""
    for host in devices:
        for other in devices:
            if other.device_id == host.device_id:
                continue
            host.shared_queries[other.device_id] = ag.stop_gradient(other.queries)
            host.shared_keys[other.device_id] = ag.stop_gradient(other.keys)
    return devices


def _key_pool(devices: list[DeviceBatch], live_device: int) -> Node:
    """Key pool in canonical device order; only one device's keys stay live.

    Using the same order everywhere keeps forward values bit-identical across
    devices and against the oracle, since detached views share their origin's
    values.
    """
    rows = []
    for dev in devices:
        if dev.device_id == live_device:
            rows.append(dev.keys)
        else:
            rows.append(devices[live_device].shared_keys[dev.device_id])
    return ag.vstack(rows)


def primary_loss(devices: list[DeviceBatch], device_id: int) -> Node:
    """Sum of the device's own matching losses plus its keys' commitment terms.

    Each local query is normalized over all D*N keys: the device's own keys
    differentiably, every other device's keys through detached views.
    """
    dev = devices[device_id]
    n = dev.queries.value.shape[0]
    pool = _key_pool(devices, device_id)
    targets = device_id * n + np.arange(n)
    per_row = losses.matching_loss_rows(dev.queries, pool, targets)
    return ag.add(ag.reduce_sum(per_row), dev.commitment)


def image_loss(devices: list[DeviceBatch], host_id: int, origin_id: int) -> Node:
    """Matching terms of the origin device's instances recomputed on the host.

    Values are identical to the origin's primary matching terms, but the
    differentiability is inverted: origin's queries and keys arrive detached
    while the host's local keys stay live, so the host keys recover exactly
    the gradient contribution the origin's primary loss stopped. Commitment
    terms are not repeated here.
    """
    if host_id == origin_id:
        raise UsageError("image loss requires host != origin")
    host = devices[host_id]
    origin = devices[origin_id]
    n = origin.queries.value.shape[0]
    detached_queries = host.shared_queries[origin_id]
    rows = []
    for dev in devices:
        if dev.device_id == host_id:
            rows.append(host.keys)
        else:
            rows.append(host.shared_keys[dev.device_id])
    pool = ag.vstack(rows)
    targets = origin_id * n + np.arange(n)
    per_row = losses.matching_loss_rows(detached_queries, pool, targets)
    return ag.reduce_sum(per_row)


def dcs_total(devices: list[DeviceBatch]) -> Node:
    """Sum of all primary and image losses, scaled by 1/(D*N).

    The forward value double-counts each matching term (once primary, D-1
    times as images); only the gradients are meaningful for updates. Divide
    the displayed value by D when reporting a loss.
    """
    d = len(devices)
    n = devices[0].queries.value.shape[0]
    total: Node | None = None
    for i in range(d):
        term = primary_loss(devices, i)
        total = term if total is None else ag.add(total, term)
        for j in range(d):
            if j != i:
                total = ag.add(total, image_loss(devices, host_id=j, origin_id=i))
    return ag.scale(total, 1.0 / (d * n))


def dcs_gradients(devices: list[DeviceBatch], params: ParameterSet) -> ParameterSet:
    return _grads_for(devices, params, dcs_total(devices))


def ncs_total(devices: list[DeviceBatch]) -> Node:
    """Primary losses only; cross-device gradients stay stopped."""
    d = len(devices)
    n = devices[0].queries.value.shape[0]
    total: Node | None = None
    for i in range(d):
        term = primary_loss(devices, i)
        total = term if total is None else ag.add(total, term)
    return ag.scale(total, 1.0 / (d * n))


def ncs_gradients(devices: list[DeviceBatch], params: ParameterSet) -> ParameterSet:
    return _grads_for(devices, params, ncs_total(devices))


def full_loss_oracle(devices: list[DeviceBatch], params: ParameterSet) -> tuple[float, ParameterSet]:
    """Mean pooled-softmax loss with nothing detached, plus its gradients.

    Every query is normalized over all D*N keys through the original
    differentiable nodes; commitment terms enter once per key. This is the
    reference the per-device scheme must reproduce gradient-for-gradient.
    """
    n = devices[0].queries.value.shape[0]
    d = len(devices)
    all_queries = ag.vstack([dev.queries for dev in devices])
    all_keys = ag.vstack([dev.keys for dev in devices])
    targets = np.arange(d * n)
    per_row = losses.matching_loss_rows(all_queries, all_keys, targets)
    total = ag.reduce_sum(per_row)
    for dev in devices:
        total = ag.add(total, dev.commitment)
    total = ag.scale(total, 1.0 / (d * n))
    return float(total.value), _grads_for(devices, params, total)


def _grads_for(devices: list[DeviceBatch], params: ParameterSet, loss: Node) -> ParameterSet:
    grads = ag.backward(loss)
    for name in params:
        grads.setdefault(name, np.zeros_like(params[name]))
    return grads
