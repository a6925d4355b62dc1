"""Netlist assembly and batched candidate evaluation shared by the scenarios."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from ..circuit import EMPort, Netlist, solve_transient_batch
from ..circuit.netlist import Capacitor, Resistor
from ..errors import PortforgeError


def combine(nets, port_ids=None) -> Netlist:
    """Place per-port netlists side by side, sharing only ground.

    Element names get a ``_p`` suffix and the EM port of copy ``p`` is bound
    to ``port_ids[p]`` (default ``p``).
    """
    nets = list(nets)
    port_ids = list(range(len(nets))) if port_ids is None else list(port_ids)
    elements, offset = [], 0
    for p, net in enumerate(nets):
        for e in net.elements:
            ch = {"name": f"{e.name}_{p}",
                  "n_plus": e.n_plus + offset if e.n_plus else 0,
                  "n_minus": e.n_minus + offset if e.n_minus else 0}
            if isinstance(e, EMPort):
                ch["port_id"] = port_ids[p]
            elements.append(replace(e, **ch))
        offset += net.node_count - 1
    return Netlist(offset + 1, elements)


def port_element(net: Netlist, port_id: int) -> EMPort:
    for p in net.ports:
        if p.port_id == port_id:
            return p
    raise KeyError(f"netlist has no element bound to port {port_id}")


def insert_filter(net: Netlist, n_hp: int, c_hp: float, r_hp: float,
                  n_lp: int, c_lp: float, r_lp: float) -> Netlist:
    """Put a high-pass cascade (series C, shunt R) then a low-pass cascade
    (series R, shunt C) between the circuit and its single EM port."""
    (port,) = net.ports
    if port.n_minus != 0:
        raise ValueError("filter insertion needs a grounded port")
    node, nxt = port.n_plus, net.node_count
    added = []
    for k in range(n_hp):
        added += [Capacitor(f"CHP{k}", node, nxt, c_hp), Resistor(f"RHP{k}", nxt, 0, r_hp)]
        node, nxt = nxt, nxt + 1
    for k in range(n_lp):
        added += [Resistor(f"RLP{k}", node, nxt, r_lp), Capacitor(f"CLP{k}", nxt, 0, c_lp)]
        node, nxt = nxt, nxt + 1
    rest = [e for e in net.elements if e is not port]
    return Netlist(nxt, rest + added + [replace(port, n_plus=node)])


def _chunks(idx, threads):
    # singleton chunks would switch the linear solver path, so keep >= 2
    k = max(1, min(threads, len(idx) // 2))
    return [list(c) for c in np.array_split(np.asarray(idx), k) if len(c)]


def solve_many(nets, dt, n_steps, newton, port_model, threads: int = 1) -> list:
    """Port-extracted solves of many netlists; failed members come back as ``None``.

    Netlists are grouped by topology and each group is solved as a batch.
    Per-member results do not depend on how the batch is split.
    """
    nets = list(nets)
    groups = {}
    for i, net in enumerate(nets):
        groups.setdefault(net.topology(), []).append(i)
    tasks = [c for idx in groups.values() for c in _chunks(idx, threads)]

    def run(idx):
        members = [nets[i] for i in idx]
        try:
            return solve_transient_batch(members, dt, n_steps, newton, port_model,
                                         on_divergence="drop")
        except PortforgeError:
            if len(members) == 1:
                return [None]
            return [r for i in idx for r in run([i])]

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(run, tasks))
    else:
        outs = [run(t) for t in tasks]
    results = [None] * len(nets)
    for idx, out in zip(tasks, outs):
        for i, r in zip(idx, out):
            results[i] = r
    return results
