"""Deterministic English-language corpus built from standard-library docstrings."""

from __future__ import annotations

import ast
import sysconfig
from pathlib import Path

SKIP_PARTS = {"test", "tests", "site-packages", "dist-packages", "idlelib", "lib2to3"}


def docstring_text(min_chars: int = 600_000, min_doc: int = 200) -> str:
    """Concatenate long docstrings from the stdlib, in sorted file order."""
    root = Path(sysconfig.get_paths()["stdlib"])
    out, size = [], 0
    for path in sorted(root.rglob("*.py")):
        if SKIP_PARTS & set(path.relative_to(root).parts):
            continue
        try:
            tree = ast.parse(path.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, ValueError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) >= min_doc:
                    out.append(doc)
                    size += len(doc) + 2
        if size >= min_chars:
            break
    return "\n\n".join(out)


def write_corpus(path: Path, min_chars: int = 600_000) -> Path:
    if not path.exists():
        path.write_text(docstring_text(min_chars), encoding="utf-8")
    return path
