"""EIR: the toolkit's SSA intermediate representation.

EIR is integer-only (32-bit two's complement, wrapping). A program is a set
of functions; each function is a list of labeled basic blocks ending in
exactly one terminator. Loop bounds are inline annotations on header labels
(`label: !bound 10`).

Textual grammar (one instruction per line in canonical form):

    fn main(%n) {
    entry:
      %c = const 0
      br loop
    loop: !bound 10
      %i = phi [entry, %c], [loop, %i2]
      %i2 = add %i, 1
      %t = icmp ult %i2, %n
      brcond %t, loop, done
    done:
      ret %i2
    }

Comments run from `;` to end of line. An optional `!dbg N` suffix carries a
debug-location id so annotated programs survive a print/parse round trip.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from .cfg import Cfg

# Operand: SSA value name (no sigil) or integer literal.
Operand = "str | int"

BINOPS = ("add", "sub", "mul", "udiv", "urem", "and", "or", "xor", "shl", "shr")
CMP_KINDS = ("eq", "ult", "slt")
TERMINATORS = ("br", "brcond", "switch", "ret")
OPCODES = BINOPS + TERMINATORS + (
    "const",
    "icmp",
    "phi",
    "call",
    "load",
    "store",
    "chan_send",
    "chan_recv",
    "emit",
)

MASK32 = 0xFFFFFFFF


class EirError(Exception):
    """Structural or semantic error in an EIR program."""


class EirSyntaxError(EirError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


@dataclass(frozen=True)
class DebugLoc:
    """Integer debug-location tag; unique per instruction once annotated."""

    id: int

    def __post_init__(self):
        if self.id < 1:
            raise EirError(f"debug location id must be positive, got {self.id}")


@dataclass
class EirInstr:
    opcode: str
    # Shape depends on opcode:
    #   const:      [int]
    #   binops:     [op, op]
    #   icmp:       [op, op] with `cmp` set
    #   phi:        [(pred_label, op), ...]
    #   br:         [label]
    #   brcond:     [op, label_true, label_false]
    #   switch:     [op, default_label, (case_value, label), ...]
    #   call:       [function_name, op...]
    #   ret/load:   [op]
    #   store:      [value_op, addr_op]
    #   chan_send:  [chan_op, value_op]
    #   chan_recv:  [chan_op]
    #   emit:       [int]
    operands: list = field(default_factory=list)
    result: str | None = None
    cmp: str | None = None
    dbg: DebugLoc | None = None

    @property
    def is_terminator(self) -> bool:
        return self.opcode in TERMINATORS

    def value_uses(self) -> list[str]:
        """SSA names read by this instruction."""
        op = self.opcode
        if op in BINOPS or op == "icmp":
            cand = self.operands
        elif op == "phi":
            cand = [v for (_, v) in self.operands]
        elif op == "brcond":
            cand = [self.operands[0]]
        elif op == "switch":
            cand = [self.operands[0]]
        elif op == "call":
            cand = self.operands[1:]
        elif op in ("ret", "load", "chan_recv"):
            cand = self.operands
        elif op in ("store", "chan_send"):
            cand = self.operands
        else:  # const, emit, br
            cand = []
        return [v for v in cand if isinstance(v, str)]

    def branch_targets(self) -> list[str]:
        if self.opcode == "br":
            return [self.operands[0]]
        if self.opcode == "brcond":
            return [self.operands[1], self.operands[2]]
        if self.opcode == "switch":
            targets = [self.operands[1]]
            targets += [lbl for (_, lbl) in self.operands[2:]]
            return targets
        return []


@dataclass
class EirBlock:
    label: str
    instrs: list[EirInstr] = field(default_factory=list)
    bound: int | None = None  # max loop iterations per entry, headers only

    @property
    def terminator(self) -> EirInstr:
        return self.instrs[-1]

    def phis(self) -> list[EirInstr]:
        out = []
        for ins in self.instrs:
            if ins.opcode != "phi":
                break
            out.append(ins)
        return out


@dataclass
class EirFunction:
    name: str
    params: list[str] = field(default_factory=list)
    blocks: list[EirBlock] = field(default_factory=list)

    @property
    def entry(self) -> EirBlock:
        return self.blocks[0]

    def block(self, label: str) -> EirBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(f"no block {label!r} in function {self.name!r}")


@dataclass
class EirProgram:
    functions: list[EirFunction] = field(default_factory=list)
    entry: str = "main"

    def function(self, name: str) -> EirFunction:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(f"no function {name!r}")

    @property
    def loop_bounds(self) -> dict[tuple[str, str], int]:
        return {
            (f.name, b.label): b.bound
            for f in self.functions
            for b in f.blocks
            if b.bound is not None
        }

    def instructions(self):
        """Iterate (function, block, instr) in deterministic program order."""
        for f in self.functions:
            for b in f.blocks:
                for ins in b.instrs:
                    yield f, b, ins


# ---------------------------------------------------------------------------
# Tokenizer / parser
# ---------------------------------------------------------------------------

_PUNCT = "(){}[],=:"


class _Token:
    __slots__ = ("kind", "value", "line", "col")

    def __init__(self, kind, value, line, col):
        self.kind = kind  # "ident" | "value" | "int" | "punct" | "bang" | "eof"
        self.value = value
        self.line = line
        self.col = col


def _tokenize(text: str) -> list[_Token]:
    toks = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c == ";":
            while i < n and text[i] != "\n":
                i += 1
            continue
        start_col = col
        if c == "%":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] in "._"):
                j += 1
            if j == i + 1:
                raise EirSyntaxError("empty value name after '%'", line, start_col)
            toks.append(_Token("value", text[i + 1 : j], line, start_col))
            col += j - i
            i = j
            continue
        if c == "!":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(_Token("bang", text[i + 1 : j], line, start_col))
            col += j - i
            i = j
            continue
        if c.isdigit() or (c == "-" and i + 1 < n and text[i + 1].isdigit()):
            j = i + 1
            while j < n and text[j].isdigit():
                j += 1
            toks.append(_Token("int", int(text[i:j]), line, start_col))
            col += j - i
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] in "._"):
                j += 1
            toks.append(_Token("ident", text[i:j], line, start_col))
            col += j - i
            i = j
            continue
        if c in _PUNCT:
            toks.append(_Token("punct", c, line, start_col))
            i += 1
            col += 1
            continue
        raise EirSyntaxError(f"unexpected character {c!r}", line, start_col)
    toks.append(_Token("eof", None, line, col))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self, ahead: int = 0) -> _Token:
        return self.toks[min(self.pos + ahead, len(self.toks) - 1)]

    def next(self) -> _Token:
        t = self.toks[self.pos]
        if t.kind != "eof":
            self.pos += 1
        return t

    def error(self, msg: str, tok: _Token | None = None):
        tok = tok or self.peek()
        raise EirSyntaxError(msg, tok.line, tok.col)

    def expect_punct(self, ch: str) -> _Token:
        t = self.next()
        if t.kind != "punct" or t.value != ch:
            self.error(f"expected {ch!r}", t)
        return t

    def expect_ident(self, what: str = "identifier") -> str:
        t = self.next()
        if t.kind != "ident":
            self.error(f"expected {what}", t)
        return t.value

    def at_punct(self, ch: str) -> bool:
        t = self.peek()
        return t.kind == "punct" and t.value == ch

    def eat_punct(self, ch: str) -> bool:
        if self.at_punct(ch):
            self.next()
            return True
        return False

    # -- grammar ------------------------------------------------------------

    def program(self) -> EirProgram:
        funcs = []
        while self.peek().kind != "eof":
            funcs.append(self.function())
        if not funcs:
            self.error("empty program")
        return EirProgram(functions=funcs)

    def function(self) -> EirFunction:
        t = self.next()
        if t.kind != "ident" or t.value != "fn":
            self.error("expected 'fn'", t)
        name = self.expect_ident("function name")
        self.expect_punct("(")
        params = []
        if not self.at_punct(")"):
            while True:
                p = self.next()
                if p.kind != "value":
                    self.error("expected parameter name", p)
                params.append(p.value)
                if not self.eat_punct(","):
                    break
        self.expect_punct(")")
        self.expect_punct("{")
        blocks = []
        while not self.at_punct("}"):
            blocks.append(self.block())
        self.expect_punct("}")
        if not blocks:
            self.error(f"function {name!r} has no blocks")
        return EirFunction(name=name, params=params, blocks=blocks)

    def _at_label(self) -> bool:
        t, t1 = self.peek(), self.peek(1)
        return t.kind == "ident" and t1.kind == "punct" and t1.value == ":"

    def block(self) -> EirBlock:
        if not self._at_label():
            self.error("expected block label")
        label = self.expect_ident()
        self.expect_punct(":")
        bound = None
        if self.peek().kind == "bang" and self.peek().value == "bound":
            self.next()
            t = self.next()
            if t.kind != "int" or t.value < 0:
                self.error("expected non-negative loop bound", t)
            bound = t.value
        instrs = []
        while not self.at_punct("}") and not self._at_label():
            instrs.append(self.instruction())
        if not instrs:
            self.error(f"block {label!r} is empty")
        return EirBlock(label=label, instrs=instrs, bound=bound)

    def operand(self):
        t = self.next()
        if t.kind == "value":
            return t.value
        if t.kind == "int":
            return t.value
        self.error("expected operand", t)

    def label_operand(self) -> str:
        return self.expect_ident("block label")

    def instruction(self) -> EirInstr:
        result = None
        if self.peek().kind == "value":
            result = self.next().value
            self.expect_punct("=")
        op_tok = self.next()
        if op_tok.kind != "ident":
            self.error("expected opcode", op_tok)
        op = op_tok.value
        if op not in OPCODES:
            self.error(f"unknown opcode {op!r}", op_tok)

        ins = EirInstr(opcode=op, result=result)
        if op == "const":
            t = self.next()
            if t.kind != "int":
                self.error("const takes an integer literal", t)
            ins.operands = [t.value]
        elif op in BINOPS:
            a = self.operand()
            self.expect_punct(",")
            b = self.operand()
            ins.operands = [a, b]
        elif op == "icmp":
            kind = self.expect_ident("comparison kind")
            if kind not in CMP_KINDS:
                self.error(f"unknown icmp kind {kind!r}")
            ins.cmp = kind
            a = self.operand()
            self.expect_punct(",")
            b = self.operand()
            ins.operands = [a, b]
        elif op == "phi":
            pairs = []
            while True:
                self.expect_punct("[")
                lbl = self.label_operand()
                self.expect_punct(",")
                val = self.operand()
                self.expect_punct("]")
                pairs.append((lbl, val))
                if not self.eat_punct(","):
                    break
            ins.operands = pairs
        elif op == "br":
            ins.operands = [self.label_operand()]
        elif op == "brcond":
            c = self.operand()
            self.expect_punct(",")
            lt = self.label_operand()
            self.expect_punct(",")
            lf = self.label_operand()
            ins.operands = [c, lt, lf]
        elif op == "switch":
            v = self.operand()
            self.expect_punct(",")
            dflt = self.label_operand()
            cases = []
            while self.eat_punct(","):
                self.expect_punct("[")
                t = self.next()
                if t.kind != "int":
                    self.error("switch case value must be an integer", t)
                self.expect_punct(",")
                lbl = self.label_operand()
                self.expect_punct("]")
                cases.append((t.value, lbl))
            ins.operands = [v, dflt] + cases
        elif op == "call":
            fname = self.expect_ident("function name")
            args = []
            while self.eat_punct(","):
                args.append(self.operand())
            ins.operands = [fname] + args
        elif op == "ret":
            ins.operands = [self.operand()]
        elif op == "load":
            ins.operands = [self.operand()]
        elif op == "store":
            v = self.operand()
            self.expect_punct(",")
            a = self.operand()
            ins.operands = [v, a]
        elif op == "chan_send":
            ch = self.operand()
            self.expect_punct(",")
            v = self.operand()
            ins.operands = [ch, v]
        elif op == "chan_recv":
            ins.operands = [self.operand()]
        elif op == "emit":
            t = self.next()
            if t.kind != "int":
                self.error("emit takes an integer literal", t)
            ins.operands = [t.value]

        if self.peek().kind == "bang" and self.peek().value == "dbg":
            self.next()
            t = self.next()
            if t.kind != "int":
                self.error("expected debug id", t)
            ins.dbg = DebugLoc(t.value)
        return ins


def parse_eir(text: str) -> EirProgram:
    """Parse EIR source text and validate the resulting program."""
    prog = _Parser(text).program()
    validate(prog)
    return prog


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------


def _fmt_operand(v) -> str:
    return f"%{v}" if isinstance(v, str) else str(v)


def format_instr(ins: EirInstr) -> str:
    op = ins.opcode
    if op == "const":
        body = f"const {ins.operands[0]}"
    elif op in BINOPS:
        body = f"{op} {_fmt_operand(ins.operands[0])}, {_fmt_operand(ins.operands[1])}"
    elif op == "icmp":
        body = f"icmp {ins.cmp} {_fmt_operand(ins.operands[0])}, {_fmt_operand(ins.operands[1])}"
    elif op == "phi":
        pairs = ", ".join(f"[{lbl}, {_fmt_operand(v)}]" for (lbl, v) in ins.operands)
        body = f"phi {pairs}"
    elif op == "br":
        body = f"br {ins.operands[0]}"
    elif op == "brcond":
        body = f"brcond {_fmt_operand(ins.operands[0])}, {ins.operands[1]}, {ins.operands[2]}"
    elif op == "switch":
        parts = [f"switch {_fmt_operand(ins.operands[0])}, {ins.operands[1]}"]
        for val, lbl in ins.operands[2:]:
            parts.append(f"[{val}, {lbl}]")
        body = ", ".join(parts)
    elif op == "call":
        args = "".join(f", {_fmt_operand(a)}" for a in ins.operands[1:])
        body = f"call {ins.operands[0]}{args}"
    elif op in ("ret", "load", "chan_recv"):
        body = f"{op} {_fmt_operand(ins.operands[0])}"
    elif op in ("store", "chan_send"):
        body = f"{op} {_fmt_operand(ins.operands[0])}, {_fmt_operand(ins.operands[1])}"
    elif op == "emit":
        body = f"emit {ins.operands[0]}"
    else:  # pragma: no cover - opcode set is closed
        raise EirError(f"cannot format opcode {op!r}")
    if ins.result is not None:
        body = f"%{ins.result} = {body}"
    if ins.dbg is not None:
        body += f" !dbg {ins.dbg.id}"
    return body


def format_eir(prog: EirProgram) -> str:
    lines = []
    for f in prog.functions:
        params = ", ".join(f"%{p}" for p in f.params)
        lines.append(f"fn {f.name}({params}) {{")
        for b in f.blocks:
            head = f"{b.label}:"
            if b.bound is not None:
                head += f" !bound {b.bound}"
            lines.append(head)
            for ins in b.instrs:
                lines.append(f"  {format_instr(ins)}")
        lines.append("}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def build_ir_cfg(func: EirFunction) -> Cfg:
    """One node per block, edges exactly per the terminator successor relation."""
    nodes = [b.label for b in func.blocks]
    edges = []
    seen = set()
    for b in func.blocks:
        for tgt in b.terminator.branch_targets():
            if (b.label, tgt) not in seen:
                seen.add((b.label, tgt))
                edges.append((b.label, tgt))
    cfg = Cfg(entry=func.blocks[0].label, nodes=nodes, edges=edges)
    cfg.validate()
    return cfg


def validate(prog: EirProgram) -> None:
    """Check structural invariants: terminators, SSA, phi coverage, targets."""
    # Lazy import: dominance is shared with the loop analyses.
    from .loops import compute_dominators

    names = [f.name for f in prog.functions]
    if len(set(names)) != len(names):
        raise EirError("duplicate function name")
    for f in prog.functions:
        _validate_function(prog, f)
    try:
        prog.function(prog.entry)
    except KeyError:
        raise EirError(f"entry function {prog.entry!r} not defined") from None

    for f in prog.functions:
        cfg = build_ir_cfg(f)
        doms = compute_dominators(cfg)
        _check_dominance(f, cfg, doms)


def _validate_function(prog: EirProgram, f: EirFunction) -> None:
    labels = [b.label for b in f.blocks]
    if len(set(labels)) != len(labels):
        raise EirError(f"{f.name}: duplicate block label")
    label_set = set(labels)

    defs: dict[str, str] = {p: "<param>" for p in f.params}
    for b in f.blocks:
        for i, ins in enumerate(b.instrs):
            if ins.is_terminator and i != len(b.instrs) - 1:
                raise EirError(f"{f.name}/{b.label}: terminator {ins.opcode!r} not at block end")
            if ins.opcode == "phi" and i > 0 and b.instrs[i - 1].opcode != "phi":
                raise EirError(f"{f.name}/{b.label}: phi not in contiguous block prefix")
            if ins.result is not None:
                if ins.result in defs:
                    raise EirError(f"{f.name}: duplicate definition of %{ins.result}")
                defs[ins.result] = b.label
            if ins.opcode == "call":
                try:
                    prog.function(ins.operands[0])
                except KeyError:
                    raise EirError(
                        f"{f.name}/{b.label}: call to undefined function {ins.operands[0]!r}"
                    ) from None
        term = b.instrs[-1]
        if not term.is_terminator:
            raise EirError(f"{f.name}/{b.label}: block does not end in a terminator")
        for tgt in term.branch_targets():
            if tgt not in label_set:
                raise EirError(f"{f.name}/{b.label}: branch target {tgt!r} does not resolve")

    # Phi predecessor coverage needs the edge relation.
    preds: dict[str, list[str]] = {lbl: [] for lbl in labels}
    for b in f.blocks:
        for tgt in b.terminator.branch_targets():
            if b.label not in preds[tgt]:
                preds[tgt].append(b.label)
    for b in f.blocks:
        for ins in b.phis():
            got = [lbl for (lbl, _) in ins.operands]
            if sorted(got) != sorted(preds[b.label]):
                missing = set(preds[b.label]) - set(got)
                if missing:
                    raise EirError(
                        f"{f.name}/{b.label}: phi misses predecessor {sorted(missing)[0]!r}"
                    )
                raise EirError(f"{f.name}/{b.label}: phi predecessors do not match block predecessors")

    # Every used name must be defined somewhere (dominance refined later).
    for b in f.blocks:
        for ins in b.instrs:
            for use in ins.value_uses():
                if use not in defs:
                    raise EirError(f"{f.name}/{b.label}: use of undefined value %{use}")


def _check_dominance(f: EirFunction, cfg: Cfg, doms: dict[str, set[str]]) -> None:
    def_block: dict[str, str] = {}
    def_index: dict[str, int] = {}
    for b in f.blocks:
        for i, ins in enumerate(b.instrs):
            if ins.result is not None:
                def_block[ins.result] = b.label
                def_index[ins.result] = i
    for b in f.blocks:
        if b.label not in doms:
            continue  # unreachable blocks are tolerated structurally
        for i, ins in enumerate(b.instrs):
            if ins.opcode == "phi":
                for (pred, v) in ins.operands:
                    if isinstance(v, str) and v in def_block:
                        if pred in doms and def_block[v] not in doms[pred]:
                            raise EirError(
                                f"{f.name}/{b.label}: phi input %{v} does not dominate edge from {pred!r}"
                            )
                continue
            for use in ins.value_uses():
                if use not in def_block:
                    continue  # parameter
                db = def_block[use]
                if db == b.label:
                    if def_index[use] >= i:
                        raise EirError(f"{f.name}/{b.label}: %{use} used before definition")
                elif db not in doms[b.label]:
                    raise EirError(
                        f"{f.name}/{b.label}: use of %{use} not dominated by its definition"
                    )


# ---------------------------------------------------------------------------
# Debug-location annotation (Stage 1 of the mapping pipeline)
# ---------------------------------------------------------------------------


def annotate_debug_locations(prog: EirProgram) -> EirProgram:
    """Assign fresh debug-location ids 1..n in deterministic program order.

    Runs on the final (already optimized) EIR, replacing any existing tags.
    Idempotent: re-running reproduces the same assignment.
    """
    out = copy.deepcopy(prog)
    next_id = 1
    for f in out.functions:
        for b in f.blocks:
            for ins in b.instrs:
                ins.dbg = DebugLoc(next_id)
                next_id += 1
    return out


def debug_id_set(prog: EirProgram) -> set[int]:
    return {ins.dbg.id for _, _, ins in prog.instructions() if ins.dbg is not None}
