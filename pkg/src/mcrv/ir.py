"""Guest IR: instruction set, textual syntax, parser and printer.

A program is a set of functions made of labelled basic blocks.  Every
block ends in exactly one terminator (``jmp``, ``br``, ``ret``, ``exit``).
See ``docs/ir.md`` for the grammar.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from mcrv.memory import wrap64
from mcrv.standin.table import NUMBERS, TABLE


class ParseError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


@dataclass(frozen=True)
class Reg:
    index: int

    def __str__(self) -> str:
        return f"r{self.index}"


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class Label:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Func:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Data:
    name: str

    def __str__(self) -> str:
        return f"@{self.name}"


Operand = Reg | Imm | Label | Func | Data

# Operand slot kinds: D dest register, R source register, V register or
# immediate, K immediate or data ref, L label, F function, W access width,
# N positive immediate, S syscall number; a trailing * repeats, ? optional.
SIGNATURES: dict[str, tuple[str, ...]] = {
    "const": ("D", "K"),
    "mov": ("D", "R"),
    "add": ("D", "V", "V"),
    "sub": ("D", "V", "V"),
    "mul": ("D", "V", "V"),
    "divu": ("D", "V", "V"),
    "cmp-eq": ("D", "V", "V"),
    "cmp-lt": ("D", "V", "V"),
    "jmp": ("L",),
    "br": ("V", "L", "L"),
    "call": ("D", "F", "V*"),
    "ret": ("V?",),
    "alloc": ("D", "V"),
    "load": ("D", "R", "W"),
    "store": ("R", "V", "W"),
    "memcpy": ("V", "V", "V"),
    "spawn": ("D", "F", "V*"),
    "yield": (),
    "choose": ("D", "N"),
    "assume": ("V",),
    "assert": ("V",),
    "syscall": ("D", "S", "V*"),
    "exit": ("V",),
}
OPCODES = tuple(SIGNATURES)
TERMINATORS = frozenset({"jmp", "br", "ret", "exit"})
WIDTHS = (1, 2, 4, 8)
MAX_SYSCALL_ARGS = 6


@dataclass(frozen=True)
class Instruction:
    opcode: str
    operands: tuple[Operand, ...] = ()

    def __str__(self) -> str:
        if not self.operands:
            return self.opcode
        ops = list(self.operands)
        if self.opcode == "syscall":
            num = ops[1].value
            ops[1] = TABLE[num].name if num in TABLE else num
        return f"{self.opcode} " + ", ".join(str(o) for o in ops)


@dataclass(frozen=True)
class Block:
    label: str
    instructions: tuple[Instruction, ...]


@dataclass(frozen=True)
class Function:
    name: str
    params: int
    regs: int
    blocks: tuple[Block, ...]
    block_map: dict[str, tuple[Instruction, ...]] = field(
        init=False, compare=False, repr=False, hash=False
    )

    def __post_init__(self) -> None:
        object.__setattr__(self, "block_map", {b.label: b.instructions for b in self.blocks})

    @property
    def entry_block(self) -> str:
        return self.blocks[0].label


@dataclass(frozen=True)
class GuestProgram:
    functions: dict[str, Function]
    entry: str = "main"
    data: tuple[tuple[str, bytes], ...] = ()

    def data_index(self) -> dict[str, int]:
        return {name: i for i, (name, _) in enumerate(self.data)}


# -- tokenizer ---------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>;[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<reg>r[0-9]+(?![A-Za-z0-9_.\-]))
  | (?P<int>-?(?:0[xX][0-9a-fA-F]+|[0-9]+)(?![A-Za-z0-9_]))
  | (?P<data>@[A-Za-z_][A-Za-z0-9_.\-]*)
  | (?P<name>[A-Za-z_][A-Za-z0-9_.\-]*)
  | (?P<punct>[{}:,/=])
    """,
    re.VERBOSE,
)
_REG_NAME = re.compile(r"r[0-9]+$")


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(source: str) -> list[Token]:
    tokens = []
    line = 1
    pos = 0
    line_start = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        text = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, text, line, pos - line_start + 1))
        nl = text.count("\n")
        if nl:
            line += nl
            line_start = pos + text.rfind("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


_ESCAPES = {"n": 10, "t": 9, "r": 13, "0": 0, "\\": 92, '"': 34}


def decode_literal(text: str) -> bytes:
    """Decode a quoted byte literal (``"..."`` with ``\\xNN`` escapes)."""
    if len(text) < 2 or text[0] != '"' or text[-1] != '"':
        raise ValueError("literal must be double-quoted")
    body = text[1:-1]
    out = bytearray()
    i = 0
    while i < len(body):
        ch = body[i]
        if ch != "\\":
            out += ch.encode("utf-8")
            i += 1
            continue
        if i + 1 >= len(body):
            raise ValueError("dangling backslash")
        esc = body[i + 1]
        if esc == "x":
            digits = body[i + 2 : i + 4]
            if len(digits) != 2 or not all(c in "0123456789abcdefABCDEF" for c in digits):
                raise ValueError(f"bad \\x escape {body[i:i + 4]!r}")
            out.append(int(digits, 16))
            i += 4
        elif esc in _ESCAPES:
            out.append(_ESCAPES[esc])
            i += 2
        else:
            raise ValueError(f"unknown escape \\{esc}")
    return bytes(out)


def encode_literal(data: bytes) -> str:
    parts = []
    for b in data:
        if b == 0x22:
            parts.append('\\"')
        elif b == 0x5C:
            parts.append("\\\\")
        elif b == 0x0A:
            parts.append("\\n")
        elif 0x20 <= b < 0x7F:
            parts.append(chr(b))
        else:
            parts.append(f"\\x{b:02x}")
    return '"' + "".join(parts) + '"'


# -- parser ------------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0
        # deferred reference checks: (kind, name, token, function or arg count)
        self.refs: list[tuple[str, str, Token, str]] = []

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.peek()
        return ParseError(message, tok.line, tok.col)

    def expect(self, kind: str, text: str | None = None) -> Token:
        tok = self.next()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = repr(text) if text is not None else kind
            got = tok.text or "end of input"
            raise self.error(f"expected {want}, found {got!r}", tok)
        return tok

    def integer(self, tok: Token) -> int:
        digits = tok.text.lstrip("-").lower()
        value = int(tok.text, 16) if digits.startswith("0x") else int(tok.text, 10)
        if not -(1 << 63) <= value < (1 << 64):
            raise self.error(f"integer literal {tok.text} out of 64-bit range", tok)
        return wrap64(value)

    def name(self, what: str) -> Token:
        tok = self.next()
        if tok.kind != "name":
            raise self.error(f"expected {what}, found {tok.text or 'end of input'!r}", tok)
        return tok

    def parse(self) -> GuestProgram:
        functions: dict[str, Function] = {}
        data: list[tuple[str, bytes]] = []
        entry: tuple[str, Token] | None = None
        while self.peek().kind != "eof":
            tok = self.name("'fn', 'data' or 'entry'")
            if tok.text == "fn":
                fn = self.function()
                if fn.name in functions:
                    raise ParseError(f"duplicate function {fn.name!r}", tok.line, tok.col)
                functions[fn.name] = fn
            elif tok.text == "data":
                ntok = self.name("data name")
                if any(n == ntok.text for n, _ in data):
                    raise self.error(f"duplicate data {ntok.text!r}", ntok)
                self.expect("punct", "=")
                stok = self.expect("string")
                try:
                    data.append((ntok.text, decode_literal(stok.text)))
                except ValueError as exc:
                    raise self.error(f"malformed literal: {exc}", stok) from None
            elif tok.text == "entry":
                if entry is not None:
                    raise self.error("duplicate entry declaration", tok)
                ntok = self.name("entry function name")
                entry = (ntok.text, ntok)
            else:
                raise self.error(f"expected 'fn', 'data' or 'entry', found {tok.text!r}", tok)
        entry_name, entry_tok = entry if entry else ("main", self.peek())
        program = GuestProgram(functions, entry_name, tuple(data))
        self.validate(program, entry_tok)
        return program

    def function(self) -> Function:
        ntok = self.name("function name")
        if _REG_NAME.match(ntok.text):
            raise self.error(f"function name {ntok.text!r} collides with register syntax", ntok)
        self.expect("punct", "/")
        params = self.integer(self.expect("int"))
        self.expect("name", "regs")
        rtok = self.expect("int")
        regs = self.integer(rtok)
        if regs < 0 or params < 0 or params > regs:
            raise self.error(f"function {ntok.text!r} declares {params} params but {regs} registers", rtok)
        self.expect("punct", "{")
        blocks: list[Block] = []
        labels: set[str] = set()
        while self.peek().kind != "punct" or self.peek().text != "}":
            ltok = self.name("block label")
            if _REG_NAME.match(ltok.text):
                raise self.error(f"label {ltok.text!r} collides with register syntax", ltok)
            if ltok.text in labels:
                raise self.error(f"duplicate label {ltok.text!r}", ltok)
            labels.add(ltok.text)
            self.expect("punct", ":")
            instrs = []
            while True:
                tok = self.peek()
                if tok.kind != "name" or self.tokens[self.pos + 1].text == ":":
                    break
                instrs.append(self.instruction(ntok.text, regs))
                if instrs[-1].opcode in TERMINATORS:
                    after = self.peek()
                    if after.kind == "name" and self.tokens[self.pos + 1].text != ":":
                        raise self.error(f"instruction after terminator in block {ltok.text!r}", after)
                    break
            if not instrs:
                raise self.error(f"block {ltok.text!r} is empty", ltok)
            if instrs[-1].opcode not in TERMINATORS:
                raise self.error(f"block {ltok.text!r} does not end in a terminator", self.peek())
            blocks.append(Block(ltok.text, tuple(instrs)))
        self.expect("punct", "}")
        if not blocks:
            raise self.error(f"function {ntok.text!r} has an empty body", ntok)
        return Function(ntok.text, params, regs, tuple(blocks))

    def instruction(self, fname: str, regs: int) -> Instruction:
        optok = self.next()
        sig = SIGNATURES.get(optok.text)
        if sig is None:
            raise self.error(f"unknown opcode {optok.text!r}", optok)
        operands: list[Operand] = []
        first = True
        for slot in sig:
            if slot.endswith("*"):
                while self.peek().text == ",":
                    self.next()
                    operands.append(self.operand(slot[0], fname, regs))
                break
            if slot.endswith("?"):
                if self.peek().kind in ("reg", "int"):
                    operands.append(self.operand(slot[0], fname, regs))
                break
            if not first:
                self.expect("punct", ",")
            operands.append(self.operand(slot, fname, regs))
            first = False
        ins = Instruction(optok.text, tuple(operands))
        if ins.opcode == "syscall" and len(ins.operands) - 2 > MAX_SYSCALL_ARGS:
            raise self.error(f"syscall takes at most {MAX_SYSCALL_ARGS} arguments", optok)
        if ins.opcode in ("call", "spawn"):
            self.refs.append(("arity", ins.operands[1].name, optok, str(len(ins.operands) - 2)))
        return ins

    def operand(self, slot: str, fname: str, regs: int) -> Operand:
        tok = self.next()
        if slot in ("D", "R") or (slot == "V" and tok.kind == "reg"):
            if tok.kind != "reg":
                raise self.error(f"expected register, found {tok.text!r}", tok)
            index = int(tok.text[1:])
            if index >= regs:
                raise self.error(f"register {tok.text} out of range (function has {regs})", tok)
            return Reg(index)
        if slot == "V":
            if tok.kind != "int":
                raise self.error(f"expected register or integer, found {tok.text!r}", tok)
            return Imm(self.integer(tok))
        if slot == "K":
            if tok.kind == "data":
                self.refs.append(("data", tok.text[1:], tok, fname))
                return Data(tok.text[1:])
            if tok.kind != "int":
                raise self.error(f"expected integer or @data, found {tok.text!r}", tok)
            return Imm(self.integer(tok))
        if slot == "W":
            if tok.kind != "int" or self.integer(tok) not in WIDTHS:
                raise self.error(f"access width must be one of {WIDTHS}, found {tok.text!r}", tok)
            return Imm(self.integer(tok))
        if slot == "N":
            if tok.kind != "int" or self.integer(tok) < 1:
                raise self.error(f"choose needs an arity >= 1, found {tok.text!r}", tok)
            return Imm(self.integer(tok))
        if slot == "L":
            if tok.kind != "name":
                raise self.error(f"expected block label, found {tok.text!r}", tok)
            self.refs.append(("label", tok.text, tok, fname))
            return Label(tok.text)
        if slot == "F":
            if tok.kind != "name":
                raise self.error(f"expected function name, found {tok.text!r}", tok)
            self.refs.append(("func", tok.text, tok, fname))
            return Func(tok.text)
        if slot == "S":
            if tok.kind == "int":
                return Imm(self.integer(tok))
            if tok.kind == "name" and tok.text in NUMBERS:
                return Imm(NUMBERS[tok.text])
            raise self.error(f"unknown syscall {tok.text!r}", tok)
        raise AssertionError(slot)

    def validate(self, program: GuestProgram, entry_tok: Token) -> None:
        data_names = {n for n, _ in program.data}
        for kind, name, tok, fname in self.refs:
            if kind == "label" and name not in program.functions[fname].block_map:
                raise ParseError(f"undefined label {name!r} in function {fname!r}", tok.line, tok.col)
            if kind == "func" and name not in program.functions:
                raise ParseError(f"call to undeclared function {name!r}", tok.line, tok.col)
            if kind == "data" and name not in data_names:
                raise ParseError(f"undefined data {name!r}", tok.line, tok.col)
            if kind == "arity" and name in program.functions:
                callee = program.functions[name]
                if int(fname) != callee.params:
                    raise ParseError(
                        f"{tok.text} of {name!r} passes {fname} arguments, expected {callee.params}",
                        tok.line,
                        tok.col,
                    )
        entry = program.functions.get(program.entry)
        if entry is None:
            raise ParseError(f"entry function {program.entry!r} is not defined", entry_tok.line, entry_tok.col)
        if entry.params != 0:
            raise ParseError(
                f"entry function {program.entry!r} must take no parameters", entry_tok.line, entry_tok.col
            )


def parse_program(source: str | bytes) -> GuestProgram:
    """Parse and validate guest IR source; raises ParseError on any defect."""
    if isinstance(source, (bytes, bytearray)):
        try:
            source = bytes(source).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"source is not UTF-8: {exc.reason}", 0, 0) from None
    try:
        return _Parser(_tokenize(source)).parse()
    except RecursionError:  # pragma: no cover - the parser is iterative
        raise ParseError("input nests too deeply", 0, 0) from None


def print_program(program: GuestProgram) -> str:
    """Canonical text form; ``parse_program`` of the result equals ``program``."""
    lines = []
    if program.entry != "main":
        lines.append(f"entry {program.entry}")
    for name, data in program.data:
        lines.append(f"data {name} = {encode_literal(data)}")
    for fn in program.functions.values():
        if lines:
            lines.append("")
        lines.append(f"fn {fn.name}/{fn.params} regs {fn.regs} {{")
        for block in fn.blocks:
            lines.append(f"{block.label}:")
            lines.extend(f"  {ins}" for ins in block.instructions)
        lines.append("}")
    return "\n".join(lines) + "\n"
