"""Database semantics for the toy services used in scenarios.

Each semantics maps client requests to database operations per instruction
version (0 old, 1 new), applies operations to an immutable store and
optionally supplies backward/forward translations.  Translated requests are
serviced as a single ``("batch", ops)`` operation whose result is that of the
last operation.
"""

from __future__ import annotations

from typing import Any


def _deliver(store: tuple, to: str, entry) -> tuple:
    inboxes = dict(store)
    inboxes[to] = inboxes.get(to, ()) + (entry,)
    return tuple(sorted(inboxes.items()))


def _inbox(store: tuple, user: str) -> tuple:
    return dict(store).get(user, ())


class Semantics:
    kind = "abstract"

    def initial(self, config) -> Any:
        return () if config is None else config

    def valid_request(self, request) -> bool:
        return True

    def op(self, version: int, client: str, request):
        raise NotImplementedError

    def apply_one(self, store, op, sender: int):
        raise NotImplementedError

    def apply(self, store, op, sender: int):
        if isinstance(op, tuple) and op and op[0] == "batch":
            result = None
            for sub in op[1]:
                store, result = self.apply_one(store, sub, sender)
            return store, result
        return self.apply_one(store, op, sender)

    def backward(self, request):
        return None

    def forward(self, request):
        return None

    def classify(self, result):
        """Return "old", "new" or None for a client-visible result."""
        return None

    def commutes_one(self, a, b) -> bool:
        return False

    def declared_commutes(self, a, b) -> bool:
        """Declared table: does ``a`` left-commute over ``b``."""
        left = a[1] if a[0] == "batch" else (a,)
        right = b[1] if b[0] == "batch" else (b,)
        return all(self.commutes_one(x, y) for x in left for y in right)

    def op_kind(self, op):
        return op[0] if isinstance(op, tuple) else op


class EmailTranslate(Semantics):
    """Email service whose update attaches a translation to sent mail."""

    kind = "email-translate"
    MARK = "@tr"

    def valid_request(self, request) -> bool:
        if not isinstance(request, tuple) or not request:
            return False
        if request[0] == "send":
            return len(request) == 3 and all(isinstance(x, str) for x in request[1:])
        return request == ("check",)

    def op(self, version, client, request):
        if request[0] == "send":
            _, to, body = request
            return ("append", to, client, body + self.MARK if version else body)
        return ("read", client)

    def apply_one(self, store, op, sender):
        if op[0] == "append":
            _, to, frm, body = op
            return _deliver(store, to, (frm, body)), ("sent", body)
        if op[0] == "read":
            return store, ("inbox", _inbox(store, op[1]))
        raise ValueError(f"unknown op {op!r}")

    def classify(self, result):
        if result[0] == "sent":
            return "new" if self.MARK in result[1] else "old"
        if any(self.MARK in body for _, body in result[1]):
            return "new"
        return None

    def commutes_one(self, a, b):
        if a[0] == "read" and b[0] == "read":
            return True
        if a[0] == "append" and b[0] == "append":
            return a[1] != b[1] or a == b
        post, read = (a, b) if a[0] == "append" else (b, a)
        return post[1] != read[1]


def _render(body: str) -> str:
    out = []
    for line in body.split("\n"):
        if line.startswith("\\*"):
            out.append(line[1:])
        elif line.startswith("*"):
            out.append("•" + line[1:])
        else:
            out.append(line)
    return "\n".join(out)


def _escape(body: str) -> str:
    return "\n".join("\\" + l if l.startswith("*") else l for l in body.split("\n"))


class EmailFormat(Semantics):
    """Email service whose update renders leading asterisks as bullets.

    Old workers deliver bodies literally unless the sender first issued an
    explicit format request.  New workers render bullets automatically and
    honor a backslash escape.
    """

    kind = "email-format"

    def valid_request(self, request) -> bool:
        if not isinstance(request, tuple) or not request:
            return False
        if request[0] == "send":
            return len(request) == 3 and all(isinstance(x, str) for x in request[1:])
        return request in (("check",), ("format",))

    def initial(self, config):
        return ((), ()) if config is None else config

    def op(self, version, client, request):
        if request[0] == "send":
            _, to, body = request
            return ("post", to, client, body, version)
        if request[0] == "format":
            return ("format", client)
        return ("read", client)

    def apply_one(self, store, op, sender):
        inboxes, flags = store
        if op[0] == "post":
            _, to, frm, body, version = op
            text = _render(body) if version or frm in flags else body
            flags = tuple(f for f in flags if f != frm)
            return (_deliver(inboxes, to, (frm, text)), flags), ("sent", text)
        if op[0] == "format":
            return (inboxes, tuple(sorted(set(flags) | {op[1]}))), ("ok",)
        if op[0] == "read":
            return store, ("inbox", _inbox(inboxes, op[1]))
        raise ValueError(f"unknown op {op!r}")

    @staticmethod
    def _plain(body: str) -> bool:
        return not any(l.startswith("\\") for l in body.split("\n"))

    def backward(self, request):
        if request[0] == "check":
            return (request,)
        if request[0] == "send" and self._plain(request[2]):
            return (("send", request[1], _escape(request[2])),)
        return None

    def forward(self, request):
        if request[0] == "check":
            return (request,)
        if request[0] == "send" and self._plain(request[2]):
            return (("format",), request)
        return None

    def classify(self, result):
        if result[0] == "sent":
            if "•" in result[1]:
                return "new"
            if any(l.startswith("*") for l in result[1].split("\n")):
                return "old"
        return None

    def commutes_one(self, a, b):
        kinds = {a[0], b[0]}
        if kinds == {"read"} or kinds == {"format"} or kinds == {"read", "format"}:
            return True
        if a[0] == "post" and b[0] == "post":
            return a[1] != b[1] or a == b
        if "read" in kinds:
            post, read = (a, b) if a[0] == "post" else (b, a)
            return post[1] != read[1]
        post, fmt = (a, b) if a[0] == "post" else (b, a)
        return post[2] != fmt[1]


class Noop(Semantics):
    """Identity database: every relay performs an op/result round trip."""

    kind = "noop"

    def op(self, version, client, request):
        return ("noop",)

    def apply_one(self, store, op, sender):
        return store, ("ok",)

    def commutes_one(self, a, b):
        return True


class Adversarial(Semantics):
    """The sticky two-valued service used by the impossibility construction.

    Workers forward their version bit; the database answers 1 to a 0-op only
    after some other worker has sent it a 1.
    """

    kind = "adversarial"

    def initial(self, config):
        return frozenset()

    def valid_request(self, request) -> bool:
        return request == 0

    def op(self, version, client, request):
        return version

    def apply_one(self, store, op, sender):
        if op == 1:
            return store | {sender}, 0
        return store, 1 if store - {sender} else 0

    def classify(self, result):
        return "new" if result == 1 else None

    def declared_commutes(self, a, b):
        return a == b

    def op_kind(self, op):
        return op


SEMANTICS = {cls.kind: cls for cls in (EmailTranslate, EmailFormat, Noop, Adversarial)}


def semantics_for(kind: str) -> Semantics:
    try:
        return SEMANTICS[kind]()
    except KeyError:
        raise ValueError(f"unknown database kind {kind!r}") from None
