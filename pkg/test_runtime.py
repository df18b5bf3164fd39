"""Runtime plumbing: random streams, hashing, cache, parallel map, logging, errors."""

import logging

import numpy as np
import pytest

from exceptions import (BracketInfeasibleError, BranchcapError, BudgetExceededError, ConvergenceError,
                        ValidationError)
from runtime import (LOGGER_NAME, STREAM_HIT, STREAM_TREE, TableCache, content_hash, env_default, get_logger,
                     parallel_map, rng_stream, setup_logging)


def test_rng_stream_depends_on_seed_index_and_stream_only():
    a = rng_stream(7, 3, STREAM_TREE).random(5)
    b = rng_stream(7, 3, STREAM_TREE).random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, rng_stream(7, 4, STREAM_TREE).random(5))
    assert not np.array_equal(a, rng_stream(7, 3, STREAM_HIT).random(5))
    assert not np.array_equal(a, rng_stream(8, 3, STREAM_TREE).random(5))


def test_rng_stream_rejects_negative_arguments():
    with pytest.raises(ValueError):
        rng_stream(-1, 0)


def test_content_hash_ignores_key_order_and_accepts_arrays():
    h1 = content_hash({"a": 1, "b": np.arange(3)})
    h2 = content_hash({"b": [0, 1, 2], "a": 1})
    assert h1 == h2
    assert h1 != content_hash({"a": 2, "b": [0, 1, 2]})


def test_table_cache_round_trip(tmp_path):
    cache = TableCache(str(tmp_path))
    values = np.linspace(0.0, 1.0, 11)
    cache.store("green", "abc123", {"d": 5}, {"values": values})
    hit = cache.load("green", "abc123")
    assert hit is not None
    np.testing.assert_array_equal(hit["values"], values)
    assert hit["header"]["digest"] == "abc123"
    assert cache.load("green", "other") is None


def test_disabled_cache_neither_reads_nor_writes(tmp_path):
    cache = TableCache(str(tmp_path / "c"), enabled=False)
    cache.store("green", "abc", {}, {"values": np.ones(2)})
    assert cache.load("green", "abc") is None
    assert not (tmp_path / "c").exists()


@pytest.mark.parametrize("workers", [1, 2])
def test_parallel_map_keeps_input_order(workers):
    assert parallel_map(lambda v: v * v, range(10), workers=workers) == [v * v for v in range(10)]


def test_env_default_casts_to_fallback_type(monkeypatch):
    monkeypatch.setenv("BRANCHCAP_WORKERS", "3")
    monkeypatch.setenv("BRANCHCAP_LOG_LEVEL", "DEBUG")
    monkeypatch.delenv("BRANCHCAP_CACHE_DIR", raising=False)
    assert env_default("workers", 1) == 3
    assert env_default("log_level", "INFO") == "DEBUG"
    assert env_default("cache_dir", ".cache") == ".cache"


def test_setup_logging_writes_the_log_file(tmp_path):
    log_file = tmp_path / "logs" / "run.log"
    root = setup_logging("DEBUG", str(log_file))
    get_logger("test").info("hello from the test")
    for handler in root.handlers:
        handler.flush()
    assert "hello from the test" in log_file.read_text(encoding="utf-8")
    assert root.name == LOGGER_NAME
    setup_logging("WARNING")
    assert logging.getLogger(LOGGER_NAME).level == logging.WARNING


@pytest.mark.parametrize("cls, code", [
    (ValidationError, 1),
    (ConvergenceError, 2),
    (BudgetExceededError, 3),
    (BracketInfeasibleError, 3),
])
def test_exit_codes(cls, code):
    err = cls("boom", {"x": 1})
    assert isinstance(err, BranchcapError)
    assert err.exit_code == code
    assert err.to_dict() == {"error": cls.__name__, "message": "boom", "details": {"x": 1}}


def test_validation_error_is_a_value_error():
    with pytest.raises(ValueError):
        raise ValidationError("bad input")
