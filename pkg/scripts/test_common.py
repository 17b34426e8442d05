import json

import numpy as np
import pytest

from common import (
    CheckpointError,
    ConfigError,
    MemoryBudgetError,
    NonFiniteError,
    NumpyEncoder,
    ShapeError,
    WorkbenchError,
    canonical_json,
    error_payload,
    get_log_timestamp,
    read_json,
    write_json,
)


def test_workbench_error_to_dict_makes_details_jsonable():
    err = MemoryBudgetError("too big", component="kv_cache", required_bytes=np.int64(10))
    payload = err.to_dict()
    assert payload == {
        "error": "memory_budget_exceeded",
        "message": "too big",
        "details": {"component": "kv_cache", "required_bytes": 10},
    }
    json.dumps(payload)


def test_error_payload_for_unexpected_exception_uses_class_name():
    assert error_payload(KeyError("x")) == {"error": "KeyError", "message": "'x'", "details": {}}


@pytest.mark.parametrize("cls,base", [
    (ShapeError, ValueError),
    (ConfigError, ValueError),
    (CheckpointError, ValueError),
    (NonFiniteError, ArithmeticError),
])
def test_error_subclasses_are_catchable_as_builtin_errors(cls, base):
    with pytest.raises(base):
        raise cls("boom")
    assert issubclass(cls, WorkbenchError)


def test_canonical_json_is_sorted_with_trailing_newline():
    text = canonical_json({"b": 1, "a": np.float32(0.5)})
    assert text == '{\n  "a": 0.5,\n  "b": 1\n}\n'
    assert canonical_json({"b": [1, 2], "a": 1}, indent=None) == '{"a":1,"b":[1,2]}\n'


def test_numpy_encoder_handles_arrays_and_scalars():
    out = json.dumps({"x": np.arange(3), "y": np.bool_(True), "z": np.int32(4)}, cls=NumpyEncoder)
    assert json.loads(out) == {"x": [0, 1, 2], "y": True, "z": 4}


def test_write_json_creates_parents_and_round_trips(tmp_path):
    path = tmp_path / "nested" / "doc.json"
    write_json(str(path), {"k": [1.5, 2]})
    assert read_json(str(path)) == {"k": [1.5, 2]}


def test_log_timestamp_is_iso_with_offset():
    stamp = get_log_timestamp()
    assert "T" in stamp
    assert stamp[-6] in "+-"
