"""Dataset files (line-delimited JSON) and the synthetic arithmetic corpora."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .grpo import arith_answer, arith_prompt
from .numeric import RngStream
from .pref_losses import PreferenceExample


class DataError(ValueError):
    pass


def _token_list(rec: dict, key: str, lineno: int, path) -> list[int]:
    v = rec.get(key)
    if not isinstance(v, list) or not all(isinstance(t, int) and not isinstance(t, bool) and t >= 0 for t in v):
        raise DataError(f"{path}:{lineno}: field {key!r} must be a list of non-negative token ids")
    return v


def _records(path, fields: tuple[str, ...]) -> Iterable[tuple[int, dict]]:
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict) or set(rec) != set(fields):
            raise DataError(f"{path}:{lineno}: record must have exactly the fields {list(fields)}")
        yield lineno, rec


def read_sft(path) -> list[tuple[list[int], list[int]]]:
    out = []
    for lineno, rec in _records(path, ("prompt", "response")):
        prompt, response = _token_list(rec, "prompt", lineno, path), _token_list(rec, "response", lineno, path)
        if not prompt:
            raise DataError(f"{path}:{lineno}: prompt must be non-empty")
        out.append((prompt, response))
    return out


def read_preferences(path) -> list[PreferenceExample]:
    out = []
    for lineno, rec in _records(path, ("prompt", "chosen", "rejected")):
        toks = [_token_list(rec, k, lineno, path) for k in ("prompt", "chosen", "rejected")]
        try:
            out.append(PreferenceExample(*toks))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def read_tasks(path) -> list[tuple[list[int], list[int]]]:
    out = []
    for lineno, rec in _records(path, ("prompt", "answer")):
        prompt, answer = _token_list(rec, "prompt", lineno, path), _token_list(rec, "answer", lineno, path)
        if not prompt:
            raise DataError(f"{path}:{lineno}: prompt must be non-empty")
        out.append((prompt, answer))
    return out


def check_vocab(max_token: int, vocab_size: int, what: str) -> None:
    if max_token >= vocab_size:
        raise DataError(f"{what} uses token id {max_token}, model vocabulary has {vocab_size}")


def write_jsonl(path, records: Iterable[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records))


def synthetic_sft(n: int, rng: RngStream) -> list[tuple[list[int], list[int]]]:
    """``n`` single-digit addition prompts with their answers."""
    ab = rng.integers(0, 10, (n, 2))
    return [(arith_prompt(int(a), int(b)), arith_answer(int(a), int(b))) for a, b in ab]


def synthetic_preferences(n: int, rng: RngStream) -> list[PreferenceExample]:
    """Correct sum preferred over a wrong one."""
    out = []
    for _ in range(n):
        a, b = (int(x) for x in rng.integers(0, 10, 2))
        wrong = int(rng.integers(0, 18))
        if wrong >= a + b:
            wrong += 1
        out.append(PreferenceExample(arith_prompt(a, b), arith_answer(a, b),
                                     arith_answer(wrong, 0)))
    return out


def arithmetic_tasks() -> list[tuple[list[int], list[int]]]:
    return [(arith_prompt(a, b), arith_answer(a, b)) for a in range(10) for b in range(10)]
