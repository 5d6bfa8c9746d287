"""
KripkeGuard - Formula Language
Text syntax for modal formulas and line-oriented axiom files.

Grammar (tightest binding first):
    unary   := '!' unary | '[]' unary | '<>' unary | atom | '(' formula ')'
    conj    := unary ('&' unary)*                  left-associative
    disj    := conj ('|' conj)*                    left-associative
    formula := disj ('->' formula)?                right-associative

Axiom files hold one `label: formula` per line; `#` starts a comment.
"""

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

from modal_kernel import And, Atom, AxiomSet, Box, Diamond, Formula, Implies, Not, Or

logger = logging.getLogger(__name__)


class FormulaError(Exception):
    """Formula text could not be read; `offset` is a character index into the input"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.message = message
        self.offset = offset


class FormulaLexError(FormulaError):
    pass


class FormulaSyntaxError(FormulaError):
    pass


class EmptyFormulaError(FormulaError):
    pass


class AxiomFileError(Exception):
    def __init__(self, message: str, line: int, column: int, source: str = "<text>"):
        super().__init__(f"{source}:{line}:{column}: {message}")
        self.message = message
        self.line = line
        self.column = column
        self.source = source


# Lexer
IDENT, NOT, AND, OR, IMPLIES, BOX, DIAMOND, LPAREN, RPAREN, EOF = (
    "identifier", "'!'", "'&'", "'|'", "'->'", "'[]'", "'<>'", "'('", "')'", "end of input",
)

_SYMBOLS = [
    ("->", IMPLIES),
    ("[]", BOX),
    ("<>", DIAMOND),
    ("!", NOT),
    ("&", AND),
    ("|", OR),
    ("(", LPAREN),
    (")", RPAREN),
]
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    offset: int


def tokenize(text: str) -> List[Token]:
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        m = _IDENT_RE.match(text, i)
        if m:
            tokens.append(Token(IDENT, m.group(0), i))
            i = m.end()
            continue
        for symbol, kind in _SYMBOLS:
            if text.startswith(symbol, i):
                tokens.append(Token(kind, symbol, i))
                i += len(symbol)
                break
        else:
            raise FormulaLexError(f"Unexpected character {ch!r}", i)
    tokens.append(Token(EOF, "", len(text)))
    return tokens


# Parser
class _Parser:
    def __init__(self, tokens: List[Token]):
        self.tokens = tokens
        self.pos = 0

    @property
    def peek(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, kind: str) -> Token:
        token = self.peek
        if token.kind != kind:
            raise FormulaSyntaxError(f"Expected {kind}, found {self._describe(token)}", token.offset)
        return self.advance()

    @staticmethod
    def _describe(token: Token) -> str:
        return EOF if token.kind == EOF else repr(token.text)

    def formula(self) -> Formula:
        left = self.disjunction()
        if self.peek.kind == IMPLIES:
            self.advance()
            return Implies(left, self.formula())
        return left

    def disjunction(self) -> Formula:
        left = self.conjunction()
        while self.peek.kind == OR:
            self.advance()
            left = Or(left, self.conjunction())
        return left

    def conjunction(self) -> Formula:
        left = self.unary()
        while self.peek.kind == AND:
            self.advance()
            left = And(left, self.unary())
        return left

    def unary(self) -> Formula:
        token = self.peek
        if token.kind == NOT:
            self.advance()
            return Not(self.unary())
        if token.kind == BOX:
            self.advance()
            return Box(self.unary())
        if token.kind == DIAMOND:
            self.advance()
            return Diamond(self.unary())
        if token.kind == IDENT:
            self.advance()
            return Atom(token.text)
        if token.kind == LPAREN:
            self.advance()
            inner = self.formula()
            self.expect(RPAREN)
            return inner
        raise FormulaSyntaxError(
            f"Expected identifier, '!', '[]', '<>' or '(', found {self._describe(token)}", token.offset
        )


def parse(text: str) -> Formula:
    """Parse formula text into an AST"""
    if not text.strip():
        raise EmptyFormulaError("Empty formula", 0)
    parser = _Parser(tokenize(text))
    result = parser.formula()
    if parser.peek.kind != EOF:
        token = parser.peek
        raise FormulaSyntaxError(f"Expected end of input, found {token.text!r}", token.offset)
    return result


# Renderer
_PRECEDENCE = {Implies: 1, Or: 2, And: 3, Not: 4, Box: 4, Diamond: 4, Atom: 5}
_ASCII = {Implies: " -> ", Or: " | ", And: " & ", Not: "!", Box: "[]", Diamond: "<>"}
_UNICODE = {Implies: " → ", Or: " ∨ ", And: " ∧ ", Not: "¬", Box: "□", Diamond: "◇"}


def render(f: Formula, unicode: bool = False) -> str:
    """Canonical text with the minimal parentheses the grammar needs"""
    symbols = _UNICODE if unicode else _ASCII

    def wrap(node: Formula, needs_parens: bool) -> str:
        text = walk(node)
        return f"({text})" if needs_parens else text

    def walk(node: Formula) -> str:
        kind = type(node)
        if kind is Atom:
            return str(node.name)
        prec = _PRECEDENCE[kind]
        if kind in (Not, Box, Diamond):
            return symbols[kind] + wrap(node.operand, _PRECEDENCE[type(node.operand)] < prec)
        left_prec = _PRECEDENCE[type(node.left)]
        right_prec = _PRECEDENCE[type(node.right)]
        if kind is Implies:
            left = wrap(node.left, left_prec <= prec)
            right = wrap(node.right, right_prec < prec)
        else:
            left = wrap(node.left, left_prec < prec)
            right = wrap(node.right, right_prec <= prec)
        return left + symbols[kind] + right

    return walk(f)


# Axiom files
_LABEL_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*:")


@dataclass(frozen=True)
class AxiomEntry:
    label: str
    source: str
    parsed: Formula
    line: int


@dataclass(frozen=True)
class AxiomFile:
    entries: Tuple[AxiomEntry, ...]
    source: str = "<text>"

    def to_axiom_set(self) -> AxiomSet:
        return AxiomSet(tuple((e.label, e.parsed) for e in self.entries))


def parse_axiom_file(text: str, source: str = "<text>") -> AxiomFile:
    """Read `label: formula` lines; unlabeled formula lines get `axiom_<line>`"""
    entries = []
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        m = _LABEL_RE.match(line)
        if m:
            label, start = m.group(1), m.end()
        else:
            label, start = f"axiom_{lineno}", 0
        formula_text = line[start:]
        try:
            parsed = parse(formula_text)
        except FormulaError as e:
            raise AxiomFileError(e.message, lineno, start + e.offset + 1, source) from e
        if label in seen:
            raise AxiomFileError(f"Duplicate label {label!r} (first defined on line {seen[label]})",
                                 lineno, (m.start(1) + 1) if m else 1, source)
        seen[label] = lineno
        entries.append(AxiomEntry(label, formula_text.strip(), parsed, lineno))
    logger.debug(f"Parsed {len(entries)} axioms from {source}")
    return AxiomFile(tuple(entries), source)


def read_axiom_file(path: Union[str, Path]) -> AxiomFile:
    path = Path(path)
    return parse_axiom_file(path.read_text(encoding="utf-8"), str(path))


def load_axioms(path: Union[str, Path]) -> AxiomSet:
    return read_axiom_file(path).to_axiom_set()
