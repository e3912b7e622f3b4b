"""Remote environments over a line-delimited canonical JSON socket protocol.

Every message is one JSON object per line: UTF-8, keys sorted, no
whitespace, no floating-point values. Observation features travel as
integers in fixed point with scale ``SCALE``. Requests carry an integer
``id`` that increases per connection and an ``op``::

    {"id":1,"op":"spec"}
    {"id":2,"op":"tasks","split":"train"}
    {"id":3,"op":"reset","seed":7,"split":"train","task_id":0}
    {"id":4,"action":[17],"op":"step"}

Responses echo the id with either ``"ok":true`` and a ``result`` or
``"ok":false`` and an ``error`` holding ``code`` and ``message``. Code 400
means a malformed or unknown request, 409 a request the episode state does
not allow (step before reset or after the end), 422 bad arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import socket
import socketserver
import threading
from dataclasses import dataclass, field

import numpy as np

from .core import EnvSpec, Goal, Observation
from .envs import (
    Env,
    EnvError,
    EpisodeFinished,
    MalformedAction,
    NotReset,
    StepResult,
    UnknownTask,
    make_env,
)

log = logging.getLogger(__name__)

SCALE = 1_000_000
OPS = ("spec", "tasks", "reset", "step")


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class BindFailure(OSError):
    pass


class ConnectFailure(ConnectionError):
    pass


class ProtocolError(RuntimeError):
    pass


class RemoteError(EnvError):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


# -- wire format --------------------------------------------------------------------


@dataclass(frozen=True)
class WireMessage:
    """A request (``op`` set) or a response (``op`` None) with its body fields."""

    id: object
    body: dict = field(default_factory=dict)

    @property
    def op(self):
        return self.body.get("op")

    def to_obj(self) -> dict:
        return {"id": self.id, **self.body}


class _FloatSeen(Exception):
    pass


def _reject_float(text):
    raise _FloatSeen(text)


def _check_values(obj) -> None:
    if isinstance(obj, float):
        raise TypeError("floating-point values are not allowed on the wire")
    if isinstance(obj, dict):
        for k, v in obj.items():
            if not isinstance(k, str):
                raise TypeError("keys must be strings")
            _check_values(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            _check_values(v)
    elif not (obj is None or isinstance(obj, (bool, int, str))):
        raise TypeError(f"unsupported wire value {type(obj).__name__}")


def encode(msg: WireMessage) -> bytes:
    """Canonical line for ``msg`` (trailing newline included)."""
    obj = msg.to_obj()
    _check_values(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8") + b"\n"


def decode(line: bytes) -> WireMessage:
    """Parse one line; raises :class:`DecodeError` with the offending byte offset."""
    if line.endswith(b"\n"):
        line = line[:-1]
    if not line.strip():
        raise DecodeError("empty message", 0)
    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError("invalid UTF-8", exc.start) from None
    try:
        obj = json.loads(text, parse_float=_reject_float, parse_constant=_reject_float)
    except _FloatSeen as exc:
        pos = text.find(str(exc.args[0]))
        raise DecodeError("floating-point value", len(text[: max(pos, 0)].encode("utf-8"))) from None
    except json.JSONDecodeError as exc:
        raise DecodeError(exc.msg, len(text[: exc.pos].encode("utf-8"))) from None
    if not isinstance(obj, dict):
        raise DecodeError("message must be a JSON object", 0)
    if "id" not in obj:
        raise DecodeError("message has no id", 0)
    msg_id = obj.pop("id")
    return WireMessage(msg_id, obj)


def features_to_wire(features) -> list:
    return [int(v) for v in np.rint(np.asarray(features, dtype=np.float64) * SCALE)]


def features_from_wire(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) / SCALE


def observation_to_wire(obs: Observation) -> dict:
    return {
        "features": features_to_wire(obs.features),
        "raw_feedback": None if obs.raw_feedback is None else list(obs.raw_feedback),
        "scale": SCALE,
        "step_index": obs.step_index,
    }


def observation_from_wire(d: dict) -> Observation:
    if d.get("scale") != SCALE:
        raise ProtocolError(f"unsupported feature scale {d.get('scale')!r}")
    fb = d["raw_feedback"]
    return Observation(int(d["step_index"]), features_from_wire(d["features"]), None if fb is None else tuple(fb))


# -- server ------------------------------------------------------------------------


def _error(msg_id, code: int, message: str) -> WireMessage:
    return WireMessage(msg_id, {"ok": False, "error": {"code": code, "message": message}})


def _ok(msg_id, result) -> WireMessage:
    return WireMessage(msg_id, {"ok": True, "result": result})


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


class Session:
    """Request handling for one connection: one environment, serial requests."""

    def __init__(self, env: Env):
        self.env = env
        self.last_id = None

    def handle_line(self, line: bytes) -> WireMessage:
        try:
            msg = decode(line)
        except DecodeError as exc:
            return _error(None, 400, str(exc))
        if not _is_int(msg.id) or (self.last_id is not None and msg.id <= self.last_id):
            return _error(msg.id if _is_int(msg.id) else None, 400, "id must be an increasing integer")
        self.last_id = msg.id
        try:
            return _ok(msg.id, self._dispatch(msg))
        except (NotReset, EpisodeFinished) as exc:
            return _error(msg.id, 409, str(exc))
        except (UnknownTask, MalformedAction) as exc:
            return _error(msg.id, 422, str(exc))
        except _BadRequest as exc:
            return _error(msg.id, 400, str(exc))

    def _dispatch(self, msg: WireMessage):
        op, body, env = msg.op, msg.body, self.env
        if op == "spec":
            return {"env": env.name, "params": env.params(), "spec": env.spec.to_dict()}
        if op == "tasks":
            split = body.get("split")
            if split not in ("train", "test"):
                raise _BadRequest("split must be 'train' or 'test'")
            return {"task_ids": [g.task_id for g in env.tasks(split)]}
        if op == "reset":
            task_id, seed, split = body.get("task_id"), body.get("seed"), body.get("split")
            if not (_is_int(task_id) and _is_int(seed)) or split not in ("train", "test"):
                raise _BadRequest("reset needs integer task_id and seed and a split")
            return {"observation": observation_to_wire(env.reset(Goal(task_id, split), seed))}
        if op == "step":
            action = body.get("action")
            if not isinstance(action, list) or not all(_is_int(a) for a in action):
                raise _BadRequest("step needs an integer action list")
            res = env.step(action)
            return {
                "done": bool(res.done),
                "observation": observation_to_wire(res.observation),
                "outcome": int(res.outcome),
                "reward": int(res.reward),
            }
        raise _BadRequest(f"unknown op {op!r}")


class _BadRequest(Exception):
    pass


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server = self.server
        session = Session(make_env(server.env_name, **server.env_params))
        sock = self.request
        sock.settimeout(server.poll_interval)
        buf = bytearray()
        while True:
            nl = buf.find(b"\n")
            if nl >= 0:
                line = bytes(buf[: nl + 1])
                del buf[: nl + 1]
                try:
                    sock.sendall(encode(session.handle_line(line)))
                except OSError:
                    return
                continue
            if server.stopping.is_set():
                return
            try:
                chunk = sock.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                return
            if not chunk:
                return
            buf.extend(chunk)


class _Server(socketserver.ThreadingMixIn, socketserver.TCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True


class ServerHandle:
    """A running server; ``close()`` stops accepting and waits for open handlers."""

    def __init__(self, server: _Server, thread: threading.Thread):
        self._server = server
        self._thread = thread

    @property
    def address(self) -> tuple:
        return self._server.server_address[:2]

    def close(self) -> None:
        self._server.stopping.set()
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(env: Env, address=("127.0.0.1", 0), poll_interval: float = 0.2) -> ServerHandle:
    """Serve fresh copies of ``env`` (one per connection) on ``address``."""
    try:
        server = _Server(tuple(address), _Handler)
    except OSError as exc:
        raise BindFailure(f"cannot bind {address}: {exc}") from None
    server.env_name = env.name
    server.env_params = env.params()
    server.poll_interval = poll_interval
    server.stopping = threading.Event()
    thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": poll_interval}, daemon=True)
    thread.start()
    return ServerHandle(server, thread)


# -- client --------------------------------------------------------------------------


def parse_address(text: str) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


class RemoteEnv(Env):
    """Client side of the protocol; satisfies the same contract as local envs.

    Static knowledge (spec, base prior, feedback verdicts) comes from a local
    instance built from the server's reported constructor parameters; every
    dynamic call goes over the wire.
    """

    def __init__(self, address, timeout: float = 30.0):
        super().__init__()
        self.address = tuple(address)
        self.timeout = timeout
        try:
            self._sock = socket.create_connection(self.address, timeout=timeout)
        except OSError as exc:
            raise ConnectFailure(f"cannot connect to {self.address}: {exc}") from None
        self._buf = bytearray()
        self._next_id = 1
        info = self._call("spec")
        self.name = info["env"]
        self._params = info["params"]
        self._shadow = make_env(self.name, **self._params)
        if self._shadow.spec.to_dict() != info["spec"]:
            raise ProtocolError("server spec does not match its reported parameters")

    # transport
    def _readline(self) -> bytes:
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line = bytes(self._buf[: nl + 1])
                del self._buf[: nl + 1]
                return line
            try:
                chunk = self._sock.recv(65536)
            except OSError as exc:
                raise ProtocolError(f"connection failed: {exc}") from None
            if not chunk:
                raise ProtocolError("server closed the connection")
            self._buf.extend(chunk)

    def _call(self, op: str, **fields):
        msg_id = self._next_id
        self._next_id += 1
        try:
            self._sock.sendall(encode(WireMessage(msg_id, {"op": op, **fields})))
        except OSError as exc:
            raise ProtocolError(f"connection failed: {exc}") from None
        try:
            reply = decode(self._readline())
        except DecodeError as exc:
            raise ProtocolError(f"undecodable reply: {exc}") from None
        if reply.id != msg_id:
            raise ProtocolError(f"reply id {reply.id!r} does not match request id {msg_id}")
        if not reply.body.get("ok"):
            err = reply.body.get("error", {})
            code, text = err.get("code"), err.get("message", "")
            if code == 409:
                raise (NotReset if "reset" in text else EpisodeFinished)(text)
            if code == 422:
                raise (UnknownTask if "task" in text else MalformedAction)(text)
            raise RemoteError(code, text)
        return reply.body["result"]

    def close(self) -> None:
        sock = getattr(self, "_sock", None)
        if sock is None:
            return
        try:
            sock.close()
        except OSError:
            pass

    def __del__(self):
        self.close()

    # contract
    @property
    def spec(self) -> EnvSpec:
        return self._shadow.spec

    def params(self) -> dict:
        return dict(self._params)

    def clone(self) -> "RemoteEnv":
        return RemoteEnv(self.address, self.timeout)

    def tasks(self, split: str) -> list:
        if split not in ("train", "test"):
            raise ValueError(f"unknown split {split!r}")
        return [Goal(t, split) for t in self._call("tasks", split=split)["task_ids"]]

    def base_prior(self):
        return self._shadow.base_prior()

    def step_verdicts(self, feedback, n_steps):
        return self._shadow.step_verdicts(feedback, n_steps)

    def outcome_class(self, state, tokens) -> int:
        return self._shadow.outcome_class(state, tokens)

    def reset(self, goal: Goal, seed: int) -> Observation:
        res = self._call("reset", task_id=int(goal.task_id), seed=int(seed), split=goal.split)
        self._state = True
        return observation_from_wire(res["observation"])

    def step(self, tokens) -> StepResult:
        res = self._call("step", action=[int(t) for t in tokens])
        return StepResult(
            observation_from_wire(res["observation"]), float(res["reward"]), bool(res["done"]), int(res["outcome"])
        )


def connect(address) -> RemoteEnv:
    if isinstance(address, str):
        address = parse_address(address)
    return RemoteEnv(address)


def main(argv=None) -> int:
    """``sgelab-serve``: serve one environment until interrupted."""
    ap = argparse.ArgumentParser(prog="sgelab-serve", description="Serve an environment over TCP.")
    ap.add_argument("env", help="environment name, e.g. combination_lock")
    ap.add_argument("--bind", default="127.0.0.1:5555", help="HOST:PORT to listen on")
    ap.add_argument("--param", action="append", default=[], metavar="KEY=INT",
                    help="integer constructor override (repeatable)")
    args = ap.parse_args(argv)
    params = {}
    for item in args.param:
        key, _, val = item.partition("=")
        params[key] = int(val)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    handle = serve(make_env(args.env, **params), parse_address(args.bind))
    log.info("serving %s on %s:%d", args.env, *handle.address)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        handle.close()
    return 0
