"""Command-line front door for the road-safety-feature mapping pipeline.

Commands cover the full flow: sample points along a road network, generate
synthetic corridors, train the frame CNN, extract features, train the
sequence model, predict, evaluate, and export prediction maps as GeoJSON.

Exit codes: 0 success, 2 usage or config error, 3 missing input file,
4 input file violates its schema, 5 validation or dimension error,
1 unexpected failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict

import numpy as np

from . import cnn as cnn_mod
from . import data, geo, lstm, metrics
from .config import PipelineConfig, load_config, stage_seed

log = logging.getLogger("safetymap")

EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_SCHEMA = 4
EXIT_VALIDATION = 5

SAMPLE_COLUMNS = ("edge_id", "seq_index", "chainage_m", "lat", "lon", "heading_deg")
PREDICTION_COLUMNS = (
    "image_id",
    "edge_id",
    "seq_index",
    "lat",
    "lon",
    "p_rs",
    "p_mcb",
    "p_cb",
    "rs",
    "mcb",
    "cb",
)


def _log_run(command: str, config: PipelineConfig) -> None:
    log.info("command=%s seed=%d config=%s", command, config.seed, asdict(config))


# --- command implementations ---


def cmd_sample(args, config: PipelineConfig) -> int:
    network = geo.load_road_network(args.network)
    points = geo.sample_points(network, config.interval_m)
    edges = {e.id: e for e in network.edges}
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SAMPLE_COLUMNS)
        for p in points:
            heading = geo.heading_at(edges[p.edge_id], p.chainage_m)
            writer.writerow(
                [
                    p.edge_id,
                    p.seq_index,
                    f"{p.chainage_m:.3f}",
                    f"{p.location.lat:.6f}",
                    f"{p.location.lon:.6f}",
                    f"{heading:.2f}",
                ]
            )
    log.info("wrote %d sample points to %s", len(points), args.out)
    return 0


def _read_samples(path: str) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != SAMPLE_COLUMNS:
            raise data.SchemaError(
                f"{path}: expected header {','.join(SAMPLE_COLUMNS)}, got {reader.fieldnames}"
            )
        for row in reader:
            rows.append(row)
    return rows


def cmd_url_gen(args, config: PipelineConfig) -> int:
    rows = _read_samples(args.samples)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            url = geo.streetview_request_url(
                geo.LatLon(float(row["lat"]), float(row["lon"])),
                float(row["heading_deg"]) % 360.0,
                args.size,
                args.key,
            )
            fh.write(url + "\n")
    log.info("wrote %d request URLs to %s", len(rows), args.out)
    return 0


def cmd_synth(args, config: PipelineConfig) -> int:
    synth_config = data.SynthConfig(
        n_points=config.n_points,
        feature_dim=config.feature_dim,
        corrupt_rate=config.corrupt_rate,
        noise_sigma=config.noise_sigma,
        interval_m=config.interval_m,
    )
    records = data.synth_corridor(synth_config, stage_seed(config.seed, "synth"))
    data.write_labels(args.out, records)
    data.write_features(args.features_out, records)
    log.info("wrote %d synthetic records to %s / %s", len(records), args.out, args.features_out)
    return 0


def cmd_train_cnn(args, config: PipelineConfig) -> int:
    records = data.load_labels(args.labels)
    records = data.load_pixels(records, args.manifest)
    shape = records[0].pixels.shape
    model = cnn_mod.init_cnn(
        cnn_mod.CnnConfig(
            input_shape=(3, shape[0], shape[1]), feature_dim=config.feature_dim
        ),
        seed=stage_seed(config.seed, "cnn-init"),
    )
    history = cnn_mod.cnn_train(
        model,
        records,
        cnn_mod.TrainConfig(
            lr=config.cnn_lr,
            batch_size=config.batch_size,
            epochs=config.cnn_epochs,
            seed=stage_seed(config.seed, "cnn-train"),
        ),
    )
    cnn_mod.cnn_save(model, args.model_out, seed=config.seed)
    if args.loss_out:
        _write_history(args.loss_out, history)
    final = history[-1]["train_loss"] if history else float("nan")
    log.info("trained cnn for %d epochs, final loss %.4f", config.cnn_epochs, final)
    return 0


def cmd_extract_features(args, config: PipelineConfig) -> int:
    records = data.load_labels(args.labels)
    records = data.load_pixels(records, args.manifest)
    model = cnn_mod.cnn_load(args.model)
    records = cnn_mod.extract_features(model, records)
    data.write_features(args.out, records)
    log.info("wrote %d feature vectors to %s", len(records), args.out)
    return 0


def cmd_train_lstm(args, config: PipelineConfig) -> int:
    records = data.load_labels(args.labels)
    records = data.attach_features(records, args.features, expected_dim=config.feature_dim)
    sequences = data.build_sequences(records, config.window, config.stride)
    model = lstm.init_sequence_model(
        args.mode,
        input_dim=config.feature_dim,
        hidden=config.hidden,
        mid_dim=config.mid_dim,
        dropout_rate=config.dropout,
        seed=stage_seed(config.seed, "lstm-init"),
    )
    history = lstm.bptt_train(
        model,
        sequences,
        lstm.SeqTrainConfig(
            lr=config.lstm_lr,
            epochs=config.lstm_epochs,
            seed=stage_seed(config.seed, "lstm-train"),
        ),
    )
    lstm.seq_save(model, args.model_out, seed=config.seed)
    if args.loss_out:
        _write_history(args.loss_out, history)
    final = history[-1]["train_loss"] if history else float("nan")
    log.info(
        "trained %s sequence model on %d windows, final loss %.4f",
        args.mode,
        len(sequences),
        final,
    )
    return 0


def cmd_predict(args, config: PipelineConfig) -> int:
    records = data.load_labels(args.labels)
    records = data.attach_features(records, args.features, expected_dim=config.feature_dim)
    model = lstm.seq_load(args.model)
    probs, labels = lstm.predict_corridor(model, records, config.window, config.threshold)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_COLUMNS)
        for r, p, lab in zip(records, probs, labels):
            writer.writerow(
                [
                    r.image_id,
                    r.edge_id,
                    r.seq_index,
                    f"{r.location.lat:.6f}",
                    f"{r.location.lon:.6f}",
                    f"{p[0]:.6f}",
                    f"{p[1]:.6f}",
                    f"{p[2]:.6f}",
                    int(lab[0]),
                    int(lab[1]),
                    int(lab[2]),
                ]
            )
    log.info("wrote %d predictions to %s", len(records), args.out)
    return 0


def _read_predictions(path: str) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != PREDICTION_COLUMNS:
            raise data.SchemaError(
                f"{path}: expected header {','.join(PREDICTION_COLUMNS)}, got {reader.fieldnames}"
            )
        rows.extend(reader)
    return rows


def _prediction_labels(rows: list[dict]) -> np.ndarray:
    return np.array([[row["rs"] == "1", row["mcb"] == "1", row["cb"] == "1"] for row in rows])


def cmd_evaluate(args, config: PipelineConfig) -> int:
    rows = _read_predictions(args.predictions)
    truth_records = data.load_labels(args.truth)
    if len(rows) != len(truth_records):
        raise ValueError(
            f"length mismatch: {len(rows)} predictions vs {len(truth_records)} truth records"
        )
    key = lambda r: (r["edge_id"], int(r["seq_index"]))
    rows.sort(key=key)
    for row, rec in zip(rows, truth_records):
        if (row["edge_id"], int(row["seq_index"])) != (rec.edge_id, rec.seq_index):
            raise ValueError(
                f"prediction/truth key mismatch at ({row['edge_id']}, {row['seq_index']})"
            )
    predictions = _prediction_labels(rows)
    truth = np.array([r.labels for r in truth_records])
    per_class = metrics.class_metrics(predictions, truth)
    metrics.warn_if_degenerate(per_class)
    counts = data.class_distribution(truth_records)
    report = metrics.metrics_report(per_class, counts)
    if args.baseline:
        base_rows = _read_predictions(args.baseline)
        if len(base_rows) != len(rows):
            raise ValueError(
                f"length mismatch: {len(base_rows)} baseline vs {len(rows)} predictions"
            )
        base_rows.sort(key=key)
        for row, rec in zip(base_rows, truth_records):
            if (row["edge_id"], int(row["seq_index"])) != (rec.edge_id, rec.seq_index):
                raise ValueError(
                    f"baseline/truth key mismatch at ({row['edge_id']}, {row['seq_index']})"
                )
        run_lengths = [end - start for start, end in data._runs(truth_records)]
        rates = metrics.isolated_error_correction_rate(
            _prediction_labels(base_rows), predictions, truth, run_lengths
        )
        report["isolated_error_correction"] = {
            name: rate for name, rate in zip(metrics.CLASS_NAMES, rates)
        }
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(geo.dumps_stable(report))
    print(metrics.format_table(per_class, counts))
    log.info("wrote metrics to %s (avg_f=%.4f)", args.out, report["avg_f"])
    return 0


def cmd_export_map(args, config: PipelineConfig) -> int:
    rows = _read_predictions(args.predictions)
    points = []
    probs = []
    for row in rows:
        seq_index = int(row["seq_index"])
        points.append(
            geo.SamplePoint(
                edge_id=row["edge_id"],
                seq_index=seq_index,
                chainage_m=seq_index * config.interval_m,
                location=geo.LatLon(float(row["lat"]), float(row["lon"])),
            )
        )
        probs.append((float(row["p_rs"]), float(row["p_mcb"]), float(row["p_cb"])))
    doc = geo.export_prediction_geojson(points, probs, config.threshold)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(doc)
    log.info("wrote prediction map with %d points to %s", len(points), args.out)
    return 0


# --- argument parsing and dispatch ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safetymap",
        description="Road safety feature mapping pipeline.",
        epilog=(
            "exit codes: 0 success, 2 usage/config error, 3 missing file, "
            "4 schema error, 5 validation error, 1 unexpected"
        ),
    )
    parser.add_argument("--config", help="pipeline config file (key = value lines)")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="sample points along a road network GeoJSON")
    p.add_argument("--network", required=True, help="GeoJSON FeatureCollection of LineStrings")
    p.add_argument("--out", required=True, help="output samples CSV")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("url-gen", help="emit streetview request URLs for sample points")
    p.add_argument("--samples", required=True, help="samples CSV from the sample command")
    p.add_argument("--key", required=True, help="API key to embed")
    p.add_argument("--size", type=int, default=224, help="square image size in pixels")
    p.add_argument("--out", required=True, help="output URL list, one per line")
    p.set_defaults(func=cmd_url_gen)

    p = sub.add_parser("synth", help="generate a synthetic labeled corridor")
    p.add_argument("--out", required=True, help="output label CSV")
    p.add_argument("--features-out", required=True, help="output feature JSON-lines")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-cnn", help="train the frame CNN on pixel images")
    p.add_argument("--labels", required=True, help="label CSV")
    p.add_argument("--manifest", required=True, help="image_id,path manifest CSV of PPM files")
    p.add_argument("--model-out", required=True, help="output model container")
    p.add_argument("--loss-out", help="optional per-epoch loss CSV")
    p.set_defaults(func=cmd_train_cnn)

    p = sub.add_parser("extract-features", help="run the CNN feature head over images")
    p.add_argument("--labels", required=True, help="label CSV")
    p.add_argument("--manifest", required=True, help="image manifest CSV")
    p.add_argument("--model", required=True, help="trained CNN container")
    p.add_argument("--out", required=True, help="output feature JSON-lines")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("train-lstm", help="train the sequence model on feature windows")
    p.add_argument("--labels", required=True, help="label CSV")
    p.add_argument("--features", required=True, help="feature JSON-lines")
    p.add_argument("--mode", choices=("shared", "separate"), default="shared")
    p.add_argument("--model-out", required=True, help="output model container")
    p.add_argument("--loss-out", help="optional per-epoch loss CSV")
    p.set_defaults(func=cmd_train_lstm)

    p = sub.add_parser("predict", help="predict per-image labels over corridors")
    p.add_argument("--labels", required=True, help="label CSV (geometry and ordering)")
    p.add_argument("--features", required=True, help="feature JSON-lines")
    p.add_argument("--model", required=True, help="trained sequence model")
    p.add_argument("--out", required=True, help="output predictions CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--predictions", required=True, help="predictions CSV")
    p.add_argument("--truth", required=True, help="ground-truth label CSV")
    p.add_argument("--out", required=True, help="output metrics JSON")
    p.add_argument(
        "--baseline",
        help="optional frame-level predictions CSV; adds isolated-error correction rates",
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-map", help="render predictions as a GeoJSON map")
    p.add_argument("--predictions", required=True, help="predictions CSV")
    p.add_argument("--out", required=True, help="output GeoJSON")
    p.set_defaults(func=cmd_export_map)

    return parser


def _write_history(path: str, history: list[dict[str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for entry in history:
            writer.writerow(
                [
                    int(entry["epoch"]),
                    f"{entry['train_loss']:.6f}",
                    f"{entry['val_loss']:.6f}" if "val_loss" in entry else "",
                ]
            )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config, {"seed": args.seed})
        _log_run(args.command, config)
        return args.func(args, config)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except data.SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ValueError as exc:
        message = str(exc)
        code = EXIT_USAGE if message.startswith("config:") else EXIT_VALIDATION
        print(f"error: {message}", file=sys.stderr)
        return code
    except Exception as exc:  # pragma: no cover - unexpected
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
