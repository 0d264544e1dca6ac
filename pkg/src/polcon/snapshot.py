"""Binary snapshot format for agents, normalizers and RNG state.

Layout: 7-byte magic ``PCSNAP1``, a little-endian uint32 JSON header
length, the UTF-8 JSON header, then the raw ``<f8`` array payloads in
header order. The header carries everything that is not a float array
(config hash, env-step counter, normalizer state, RNG states, array
names/shapes), so a snapshot fully determines the agent it came from.
"""

import json
import struct

import numpy as np

from .diffnet import AdamState, NetworkSpec, ParamVector

MAGIC = b"PCSNAP1"
FORMAT_VERSION = 1


class SnapshotError(RuntimeError):
    pass


def _spec_meta(spec):
    return {
        "obs_dim": spec.obs_dim,
        "act_dim": spec.act_dim,
        "hidden_widths": list(spec.hidden_widths),
        "activation": spec.activation,
    }


def _spec_from_meta(meta):
    return NetworkSpec(
        obs_dim=int(meta["obs_dim"]),
        act_dim=int(meta["act_dim"]),
        hidden_widths=tuple(meta["hidden_widths"]),
        activation=meta["activation"],
    )


def write_snapshot(path, *, kind, spec, arrays, meta):
    """Write named float64 arrays plus a JSON-serializable meta dict.

    `arrays` is an ordered dict name -> ndarray; shapes go into the header
    and the payloads are concatenated raw after it.
    """
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["kind"] = kind
    header["spec"] = _spec_meta(spec)
    header["arrays"] = [
        {"name": name, "shape": list(np.asarray(arr).shape)}
        for name, arr in arrays.items()
    ]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_snapshot(path):
    """Returns (meta dict, spec, arrays dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise SnapshotError(f"{path}: bad magic, not a snapshot file")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        meta = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"{path}: corrupt header: {exc}") from None
    off += hlen
    if meta.get("format_version") != FORMAT_VERSION:
        raise SnapshotError(
            f"{path}: unsupported format version {meta.get('format_version')!r}"
        )
    spec = _spec_from_meta(meta["spec"])
    arrays = {}
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if off + nbytes > len(data):
            raise SnapshotError(f"{path}: truncated payload for {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            data, dtype="<f8", count=n, offset=off
        ).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise SnapshotError(f"{path}: {len(data) - off} trailing bytes")
    return meta, spec, arrays


def _adam_arrays(prefix, adam):
    return {
        f"{prefix}.m": adam.first_moment,
        f"{prefix}.v": adam.second_moment,
    }


def agent_arrays(agent):
    """Float-array state of any supported agent, in a stable order."""
    arrays, counts = {}, {}
    if agent.kind == "pc":
        st = agent.state
        for k, net in enumerate(st.nets):
            arrays[f"net{k}"] = net.values
            arrays.update(_adam_arrays(f"adam{k}", st.adam_states[k]))
        counts["adam_steps"] = [a.step_count for a in st.adam_states]
    else:
        arrays["net0"] = agent.params.values
        arrays.update(_adam_arrays("adam0", agent.adam))
        counts["adam_steps"] = [agent.adam.step_count]
        if agent.kind == "synaptic":
            arrays["beakers"] = agent.chain.u
    return arrays, counts


def restore_agent_arrays(agent, arrays, counts):
    steps = counts["adam_steps"]
    if agent.kind == "pc":
        st = agent.state
        for k in range(len(st.nets)):
            st.nets[k] = ParamVector(st.spec, arrays[f"net{k}"].copy())
            st.adam_states[k] = AdamState(
                arrays[f"adam{k}.m"].copy(), arrays[f"adam{k}.v"].copy(),
                int(steps[k]),
            )
    else:
        agent.params = ParamVector(agent.spec, arrays["net0"].copy())
        agent.adam = AdamState(
            arrays["adam0.m"].copy(), arrays["adam0.v"].copy(), int(steps[0])
        )
        if agent.kind == "synaptic":
            agent.chain.u = arrays["beakers"].copy()
    return agent


def rng_state_meta(rng):
    """JSON-safe PCG64 state (ints serialized as strings: 128-bit values)."""
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def rng_from_meta(meta):
    if meta["bit_generator"] != "PCG64":
        raise SnapshotError(f"unsupported bit generator {meta['bit_generator']!r}")
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(meta["state"]), "inc": int(meta["inc"])},
        "has_uint32": int(meta["has_uint32"]),
        "uinteger": int(meta["uinteger"]),
    }
    return rng
