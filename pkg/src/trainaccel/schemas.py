"""JSON Schemas for emitted reports."""

from jsonschema import Draft202012Validator

_num_list = {"type": "array", "items": {"type": "number"}}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "MetricsReport",
    "type": "object",
    "required": ["run_id", "accuracy", "macro_f1", "exec_time", "train_loss", "val_loss",
                 "throughput", "speedup_vs_baseline", "quantization_error_trace", "pin_histories",
                 "predictions", "truth", "param_digest", "config"],
    "properties": {
        "run_id": {"type": "string"},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 100},
        "macro_f1": {"type": "number", "minimum": 0, "maximum": 100},
        "exec_time": {"type": "number", "exclusiveMinimum": 0},
        "train_loss": _num_list,
        "val_loss": _num_list,
        "train_accuracy": _num_list,
        "val_accuracy": _num_list,
        "val_f1": _num_list,
        "epoch_times": _num_list,
        "throughput": {"type": "number", "minimum": 0},
        "op_count": {"type": "integer", "minimum": 0},
        "speedup_vs_baseline": {"type": ["number", "null"]},
        "quantization_error_trace": _num_list,
        "loss_scale_trace": _num_list,
        "pin_histories": {"type": "array", "items": {"type": "array", "items": {"type": "boolean"}}},
        "optimizer_steps": {"type": "integer", "minimum": 0},
        "skipped_steps": {"type": "integer", "minimum": 0},
        "predictions": {"type": "array", "items": {"type": "integer"}},
        "truth": {"type": "array", "items": {"type": "integer"}},
        "num_classes": {"type": "integer"},
        "param_digest": {"type": "string"},
        "techniques": {"type": "array", "items": {"type": "string"}},
        "backend": {"type": "string"},
        "config": {"type": "object", "additionalProperties": {"type": "string"}},
    },
    "additionalProperties": False,
}

TABLE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "AblationTable",
    "type": "object",
    "required": ["baseline", "runs", "rows"],
    "properties": {
        "baseline": {"type": ["string", "null"]},
        "runs": {"type": "array", "items": REPORT_SCHEMA},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["toggles", "run_id", "speedup", "error"],
                "properties": {
                    "toggles": {"type": "array", "items": {"type": "string"}},
                    "run_id": {"type": "string"},
                    "speedup": {"type": ["number", "null"]},
                    "error": {"type": ["string", "null"]},
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}


def validate_report(doc):
    """Raise jsonschema.ValidationError if ``doc`` is not a valid report or table."""
    schema = TABLE_SCHEMA if "rows" in doc else REPORT_SCHEMA
    Draft202012Validator(schema).validate(doc)


CSV_COLUMNS = ["run_id", "epoch", "train_loss", "val_loss", "acc", "f1", "exec_time_s", "throughput"]

CSV_ROW_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ReportCsvRow",
    "type": "object",
    "required": CSV_COLUMNS,
    "properties": {
        "run_id": {"type": "string", "minLength": 1},
        "epoch": {"type": "integer", "minimum": 1},
        "train_loss": {"type": "number"},
        "val_loss": {"type": "number"},
        "acc": {"type": "number", "minimum": 0, "maximum": 100},
        "f1": {"type": "number", "minimum": 0, "maximum": 100},
        "exec_time_s": {"type": "number", "minimum": 0},
        "throughput": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}


def validate_csv(path):
    """Check header order and every row of a report CSV; returns the typed rows."""
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_COLUMNS:
            raise ValueError(f"{path}: header {header} != {CSV_COLUMNS}")
        validator = Draft202012Validator(CSV_ROW_SCHEMA)
        rows = []
        for line in reader:
            if len(line) != len(CSV_COLUMNS):
                raise ValueError(f"{path}: row {reader.line_num} has {len(line)} fields")
            row = {"run_id": line[0], "epoch": int(line[1])}
            row.update({k: float(v) for k, v in zip(CSV_COLUMNS[2:], line[2:])})
            validator.validate(row)
            rows.append(row)
    return rows
