"""Small random operator graphs and tight profiles for property tests."""

from __future__ import annotations

import random

from vdcore.costmodel import get_profile, scaled
from vdcore.workload import OperatorNode, TensorRef, build_graph

T = 8  # tile edge


def random_graph(rng: random.Random, max_ops: int = 5):
    rows, cols = rng.randint(1, 3), rng.randint(1, 2)
    shape, tile = (rows * T, cols * T), (T, T)
    tensors = [TensorRef("x0", shape, tile, init="uniform")]
    acts = ["x0"]
    nodes = []
    for k in range(rng.randint(1, max_ops)):
        out = f"x{k + 1}"
        kind = rng.choice(["unary", "binary", "gemm"] if len(acts) > 1 else ["unary", "gemm"])
        if kind == "unary":
            src = rng.choice(acts)
            node = OperatorNode(f"op{k}", "ELEMWISE", (src,), (out,),
                                {"fn": rng.choice(["silu", "relu", "neg", "copy"])})
        elif kind == "binary":
            a, b = rng.sample(acts, 2)
            node = OperatorNode(f"op{k}", "ELEMWISE", (a, b), (out,), {"fn": rng.choice(["add", "mul"])})
        else:
            w = f"w{k}"
            tensors.append(TensorRef(w, (shape[1], shape[1]), tile, init="uniform"))
            node = OperatorNode(f"op{k}", "GEMM", (rng.choice(acts), w), (out,))
        tensors.append(TensorRef(out, shape, tile, init="zeros"))
        nodes.append(node)
        acts.append(out)
    return build_graph(tensors, nodes)


def tight_profile(rng: random.Random, slots: int | None = None):
    """One or two SMs, one or two compute cores each, 4 to 8 slots of one tile."""
    slots = slots or rng.randint(4, 8)
    slot = T * T * 4
    return scaled(get_profile("H100"), rng.randint(1, 2), vcc_per_sm=rng.randint(1, 2),
                  slot_size=slot, shmem_per_sm=slots * slot,
                  name=f"tight-{slots}")
