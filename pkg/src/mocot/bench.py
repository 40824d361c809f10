"""Dataset ingestion, experiment orchestration, failure tagging, and report
emission. One declarative JSON document configures a run; environment
variables are used only for API keys.
"""

from __future__ import annotations

import json
import logging
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .backend import (
    Backend,
    BackendConfig,
    ImageRef,
    RecordingBackend,
    build_backend,
)
from .engine import (
    CVQAInstance,
    MocotEngine,
    MoCoTTrace,
    StageBackends,
    StageConfig,
    run_direct,
)
from .errors import ConfigError, DatasetError, JudgeParseError, MocotError
from .metrics import EvalReport, SampleRow, aggregate, bleu4, cas, rouge_l, usr
from .parsing import ensure_option_label, extract_option_letter

logger = logging.getLogger(__name__)

METHODS = ("direct-no-cot", "direct-cot", "grpo-tagged", "mocot")

# Default deployments: the hosted model drives planning/meta/verification,
# a locally served vision model generates the diverse sub-answers, and one
# multimodal judge scores both faithfulness metrics.
DEFAULT_STAGE_MODEL = "gpt-4o-mini"
DEFAULT_EXECUTOR_MODEL = "Qwen2.5-VL-7B-Instruct"
DEFAULT_JUDGE_MODEL = "InternVL3-8B"
FAILURE_TAGS = (
    "satirical-target-confusion",
    "symbolic-misalignment",
    "salient-cue-omission",
    "other",
    "none",
)
DEFAULT_METRICS = ("accuracy",)


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    path: str
    format: str  # "mcq-jsonl" | "open-ended-jsonl"
    split: str = "evaluation"

    def __post_init__(self):
        if self.format not in ("mcq-jsonl", "open-ended-jsonl"):
            raise ConfigError(f"unknown dataset format {self.format!r}")
        if self.split not in ("train", "validation", "evaluation"):
            raise ConfigError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec
    method: str
    stages: StageConfig | None = None  # required for method="mocot"
    direct_backend: BackendConfig | None = None  # required for direct methods
    judge: BackendConfig | None = None  # required when cas/usr requested
    metrics: tuple[str, ...] = DEFAULT_METRICS
    counterfactual_strategy: str = "next-label"
    parallelism: int = 1
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.method == "mocot" and self.stages is None:
            raise ConfigError("method 'mocot' requires stage configs")
        if self.method != "mocot" and self.direct_backend is None:
            raise ConfigError(f"method {self.method!r} requires a direct backend")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        unknown = set(self.metrics) - {"accuracy", "cas", "usr", "bleu4", "rouge_l"}
        if unknown:
            raise ConfigError(f"unknown metrics {sorted(unknown)}")


@dataclass
class RunArtifacts:
    config_snapshot: dict
    seed: int
    rows: list[SampleRow]
    report: EvalReport
    traces: dict[str, dict]  # instance id -> trace/direct-output record
    transcripts: list[dict]
    failures: dict[str, str]  # instance id -> error text
    tag_distribution: dict[str, float] = field(default_factory=dict)


# --- dataset loading ------------------------------------------------------------

def _image_ref(raw: str) -> ImageRef:
    if raw.startswith("http://") or raw.startswith("https://"):
        return ImageRef("url", raw)
    return ImageRef.from_path(raw)


def load_dataset(spec: DatasetSpec) -> list[CVQAInstance]:
    """Read and validate one instance per JSONL row; ids must be unique."""
    path = Path(spec.path)
    if not path.exists():
        raise DatasetError(f"dataset file {spec.path} does not exist")
    instances: list[CVQAInstance] = []
    seen: set[str] = set()
    open_ended = spec.format == "open-ended-jsonl"
    for row_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON: {exc.msg}", row=row_number) from exc
        try:
            instance = _parse_row(row, open_ended)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(str(exc), row=row_number) from exc
        if instance.id in seen:
            raise DatasetError(f"duplicate id {instance.id!r}", row=row_number)
        seen.add(instance.id)
        instances.append(instance)
    if not instances:
        raise DatasetError(f"dataset file {spec.path} is empty")
    return instances


def _parse_row(row: dict, open_ended: bool) -> CVQAInstance:
    for key in ("id", "image", "question"):
        if key not in row:
            raise KeyError(f"missing field {key!r}")
    if open_ended:
        return CVQAInstance(
            id=str(row["id"]),
            image=_image_ref(row["image"]),
            question=row["question"],
            options=(),
            gold_answer=row.get("gold", ""),
            mode="open-ended",
        )
    raw_options = row.get("options")
    if not isinstance(raw_options, list) or len(raw_options) < 2:
        raise ValueError("mcq row needs an 'options' list with at least 2 entries")
    options = []
    for opt in raw_options:
        options.append((ensure_option_label(opt["label"]), opt["text"]))
    gold = row.get("gold", "")
    if gold:
        gold = extract_option_letter(gold)
    return CVQAInstance(
        id=str(row["id"]),
        image=_image_ref(row["image"]),
        question=row["question"],
        options=tuple(options),
        gold_answer=gold,
        mode="mcq",
    )


def default_stage_config(
    endpoint: str,
    executor_endpoint: str | None = None,
    api_key_env_var: str = "OPENAI_API_KEY",
) -> StageConfig:
    """Stage configs for the default split deployment.

    Planner, meta, and checker share one endpoint/model; the executor may
    point at a separately served model (same endpoint when omitted).
    Temperature defaults to 0 for reproducible runs.
    """
    shared = BackendConfig(
        endpoint=endpoint, model_name=DEFAULT_STAGE_MODEL, api_key_env_var=api_key_env_var
    )
    executor = BackendConfig(
        endpoint=executor_endpoint or endpoint,
        model_name=DEFAULT_EXECUTOR_MODEL,
        api_key_env_var=api_key_env_var if executor_endpoint is None else "",
    )
    return StageConfig(planner=shared, executor=executor, meta=shared, checker=shared)


def default_judge_config(endpoint: str, api_key_env_var: str = "") -> BackendConfig:
    return BackendConfig(
        endpoint=endpoint, model_name=DEFAULT_JUDGE_MODEL, api_key_env_var=api_key_env_var
    )


def split_dataset(
    instances: Sequence[CVQAInstance], fraction: float, seed: int
) -> tuple[list[CVQAInstance], list[CVQAInstance]]:
    """Deterministic seeded split into (sampled, held-out) partitions."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction outside (0,1)")
    order = list(range(len(instances)))
    random.Random(seed).shuffle(order)
    cut = round(fraction * len(instances))
    sampled = sorted(order[:cut])
    held = sorted(order[cut:])
    return [instances[i] for i in sampled], [instances[i] for i in held]


# --- config (de)serialization ------------------------------------------------------

def backend_config_from_dict(raw: dict) -> BackendConfig:
    return BackendConfig(
        kind=raw.get("kind", "http-openai-compatible"),
        endpoint=raw.get("endpoint", ""),
        model_name=raw.get("model_name", ""),
        temperature=raw.get("temperature", 0.0),
        max_output_tokens=raw.get("max_output_tokens", 1024),
        api_key_env_var=raw.get("api_key_env_var", ""),
        mock_script=raw.get("mock_script"),
    )


def load_run_config(path: str | Path) -> RunConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return run_config_from_dict(raw)


def run_config_from_dict(raw: dict) -> RunConfig:
    try:
        dataset = DatasetSpec(**raw["dataset"])
    except KeyError as exc:
        raise ConfigError(f"missing config section {exc}") from exc
    stages = None
    if "stages" in raw:
        block = dict(raw["stages"])
        stage_backends = {
            name: backend_config_from_dict(block.pop(name))
            for name in ("planner", "executor", "meta", "checker")
            if name in block
        }
        missing = {"planner", "executor", "meta", "checker"} - set(stage_backends)
        if missing:
            raise ConfigError(f"stages block missing {sorted(missing)}")
        stages = StageConfig(
            planner=stage_backends["planner"],
            executor=stage_backends["executor"],
            meta=stage_backends["meta"],
            checker=stage_backends["checker"],
            max_verify_retries=block.get("max_verify_retries", 3),
            planner_prompt_variant=block.get("planner_prompt_variant", "verbatim"),
        )
    direct = backend_config_from_dict(raw["direct_backend"]) if "direct_backend" in raw else None
    judge = backend_config_from_dict(raw["judge"]) if "judge" in raw else None
    return RunConfig(
        dataset=dataset,
        method=raw.get("method", "direct-no-cot"),
        stages=stages,
        direct_backend=direct,
        judge=judge,
        metrics=tuple(raw.get("metrics", DEFAULT_METRICS)),
        counterfactual_strategy=raw.get("counterfactual_strategy", "next-label"),
        parallelism=raw.get("parallelism", 1),
        seed=raw.get("seed", 0),
        output_dir=raw.get("output_dir", "out"),
    )


def apply_mock_script(config: RunConfig, script_path: str) -> RunConfig:
    """Point every configured backend at one shared mock script."""
    mock = BackendConfig(kind="scripted-mock", mock_script=script_path)
    stages = config.stages
    if stages is not None:
        stages = StageConfig(
            planner=mock,
            executor=mock,
            meta=mock,
            checker=mock,
            max_verify_retries=stages.max_verify_retries,
            planner_prompt_variant=stages.planner_prompt_variant,
        )
    return replace(
        config,
        stages=stages,
        direct_backend=mock if config.direct_backend is not None else None,
        judge=mock if config.judge is not None else None,
    )


# --- experiment orchestration -------------------------------------------------------

def _method_variant(method: str) -> str:
    return {"direct-no-cot": "no-cot", "direct-cot": "cot", "grpo-tagged": "grpo-tagged"}[method]


def run_experiment(config: RunConfig, shared_mock: Backend | None = None) -> RunArtifacts:
    """Execute the configured method per instance and compute the metric set.

    Per-instance failures are recorded and excluded from aggregates; only
    configuration/backend-setup problems abort the run. ``shared_mock``
    short-circuits every backend to one scripted mock (used for replays).
    """
    instances = load_dataset(config.dataset)
    transcripts: list[dict] = []
    judge_lock = threading.Lock()
    judge_holder: dict[str, Backend] = {}

    def wrap(stage: str, backend: Backend) -> Backend:
        return RecordingBackend(backend, stage, transcripts)

    engine = None
    direct = None
    if config.method == "mocot":
        if shared_mock is not None:
            backends = StageBackends(
                planner=wrap("plan", shared_mock),
                executor=wrap("execute", shared_mock),
                meta=wrap("meta", shared_mock),
                checker=wrap("verify", shared_mock),
            )
        else:
            base = StageBackends.from_config(config.stages)
            backends = StageBackends(
                planner=wrap("plan", base.planner),
                executor=wrap("execute", base.executor),
                meta=wrap("meta", base.meta),
                checker=wrap("verify", base.checker),
            )
        engine = MocotEngine(config.stages, backends)
    else:
        direct = wrap(
            "direct", shared_mock if shared_mock is not None else build_backend(config.direct_backend)
        )

    needs_judge = bool({"cas", "usr"} & set(config.metrics))

    def get_judge() -> Backend:
        # Lazily initialized so accuracy-only runs never touch the judge.
        with judge_lock:
            if "judge" not in judge_holder:
                if shared_mock is not None:
                    judge_holder["judge"] = wrap("judge", shared_mock)
                elif config.judge is not None:
                    judge_holder["judge"] = wrap("judge", build_backend(config.judge))
                else:
                    raise ConfigError("cas/usr metrics need a judge backend")
            return judge_holder["judge"]

    traces: dict[str, dict] = {}
    failures: dict[str, str] = {}
    rows_by_id: dict[str, SampleRow] = {}
    lock = threading.Lock()

    def evaluate(instance: CVQAInstance) -> None:
        try:
            prediction, rationale = _predict(instance)
            row = _score(instance, prediction, rationale)
        except MocotError as exc:
            logger.warning("instance %s failed: %s", instance.id, exc)
            with lock:
                failures[instance.id] = str(exc)
                rows_by_id[instance.id] = SampleRow(id=instance.id, prediction=None)
            return
        with lock:
            rows_by_id[instance.id] = row

    def _predict(instance: CVQAInstance) -> tuple[str, str | None]:
        if config.method == "mocot":
            trace: MoCoTTrace = engine.run_pipeline(instance)
            with lock:
                traces[instance.id] = trace.to_dict()
            return trace.answer, trace.fir
        prediction, rationale = run_direct(instance, direct, _method_variant(config.method))
        with lock:
            traces[instance.id] = {"answer": prediction, "rationale": rationale}
        return prediction, rationale

    def _score(instance: CVQAInstance, prediction: str, rationale: str | None) -> SampleRow:
        correct = None
        if "accuracy" in config.metrics and instance.mode == "mcq" and instance.gold_answer:
            correct = prediction == instance.gold_answer
        bleu = rouge = None
        if instance.mode == "open-ended" and instance.gold_answer:
            if "bleu4" in config.metrics:
                bleu = bleu4(prediction, instance.gold_answer)
            if "rouge_l" in config.metrics:
                rouge = rouge_l(prediction, instance.gold_answer)
        cas_value = usr_value = None
        if needs_judge and rationale:
            rng = random.Random(f"{config.seed}:{instance.id}")
            if "cas" in config.metrics and instance.mode == "mcq":
                try:
                    record = cas(
                        instance,
                        prediction,
                        rationale,
                        get_judge(),
                        config.counterfactual_strategy,
                        rng,
                    )
                    cas_value = record.cas
                except JudgeParseError as exc:
                    logger.warning("cas judge failed on %s: %s", instance.id, exc)
            if "usr" in config.metrics:
                try:
                    usr_value = usr(instance, rationale, get_judge()).usr
                except JudgeParseError as exc:
                    logger.warning("usr judge failed on %s: %s", instance.id, exc)
        return SampleRow(
            id=instance.id,
            prediction=prediction,
            correct=correct,
            cas=cas_value,
            usr=usr_value,
            bleu4=bleu,
            rouge_l=rouge,
        )

    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            list(pool.map(evaluate, instances))
    else:
        for instance in instances:
            evaluate(instance)

    rows = [rows_by_id[i.id] for i in instances]  # dataset order, not completion order
    report = aggregate(rows)
    return RunArtifacts(
        config_snapshot=_config_snapshot(config),
        seed=config.seed,
        rows=rows,
        report=report,
        traces=traces,
        transcripts=transcripts,
        failures=failures,
    )


def _config_snapshot(config: RunConfig) -> dict:
    def backend_dict(cfg: BackendConfig | None) -> dict | None:
        if cfg is None:
            return None
        return {
            "kind": cfg.kind,
            "endpoint": cfg.endpoint,
            "model_name": cfg.model_name,
            "temperature": cfg.temperature,
            "max_output_tokens": cfg.max_output_tokens,
            "api_key_env_var": cfg.api_key_env_var,
            "mock_script": cfg.mock_script,
        }

    snapshot = {
        "dataset": {
            "name": config.dataset.name,
            "path": config.dataset.path,
            "format": config.dataset.format,
            "split": config.dataset.split,
        },
        "method": config.method,
        "metrics": list(config.metrics),
        "counterfactual_strategy": config.counterfactual_strategy,
        "parallelism": config.parallelism,
        "seed": config.seed,
        "output_dir": config.output_dir,
        "direct_backend": backend_dict(config.direct_backend),
        "judge": backend_dict(config.judge),
    }
    if config.stages is not None:
        snapshot["stages"] = {
            "planner": backend_dict(config.stages.planner),
            "executor": backend_dict(config.stages.executor),
            "meta": backend_dict(config.stages.meta),
            "checker": backend_dict(config.stages.checker),
            "max_verify_retries": config.stages.max_verify_retries,
            "planner_prompt_variant": config.stages.planner_prompt_variant,
        }
    return snapshot


# --- report emission -------------------------------------------------------------------

CSV_COLUMNS = ("id", "prediction", "correct", "cas", "usr", "bleu4", "rouge_l", "failure_tag")


def emit_report(artifacts: RunArtifacts, formats: set[str], out_dir: str | Path) -> list[Path]:
    """Write report files; JSON is the source of truth, CSV/text derive from it."""
    unknown = formats - {"json", "csv", "text"}
    if unknown:
        raise ConfigError(f"unknown report formats {sorted(unknown)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    payload = {
        "config": artifacts.config_snapshot,
        "seed": artifacts.seed,
        "report": artifacts.report.to_dict(),
        "failures": dict(sorted(artifacts.failures.items())),
        "tag_distribution": dict(sorted(artifacts.tag_distribution.items())),
    }
    if "json" in formats:
        path = out / "report.json"
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    if "csv" in formats:
        path = out / "report.csv"
        lines = [",".join(CSV_COLUMNS)]
        for row in artifacts.report.rows:
            record = row.to_dict()
            lines.append(
                ",".join("" if record[c] is None else str(record[c]) for c in CSV_COLUMNS)
            )
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    if "text" in formats:
        path = out / "report.txt"
        path.write_text(_render_text_report(artifacts), encoding="utf-8")
        written.append(path)

    (out / "traces.jsonl").write_text(
        "".join(
            json.dumps({"id": k, **v}, sort_keys=True) + "\n"
            for k, v in sorted(artifacts.traces.items())
        ),
        encoding="utf-8",
    )
    (out / "transcripts.jsonl").write_text(
        "".join(json.dumps(t, sort_keys=True) + "\n" for t in artifacts.transcripts),
        encoding="utf-8",
    )
    (out / "config.json").write_text(
        json.dumps(artifacts.config_snapshot, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return written


def load_report(path: str | Path) -> EvalReport:
    """Read a persisted report.json back into an EvalReport.

    The stored aggregates are verified against recomputation from the rows;
    a tampered or stale file fails loudly.
    """
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    block = payload["report"]
    rows = tuple(
        SampleRow(
            id=r["id"],
            prediction=r["prediction"],
            correct=r["correct"],
            cas=r["cas"],
            usr=r["usr"],
            bleu4=r["bleu4"],
            rouge_l=r["rouge_l"],
            failure_tag=r.get("failure_tag", "none"),
            tag_source=r.get("tag_source", "unassigned"),
        )
        for r in block["rows"]
    )
    report = EvalReport(rows, dict(block["aggregates"]), dict(block["excluded"]))
    report.verify_consistency()
    return report


def _render_text_report(artifacts: RunArtifacts) -> str:
    report = artifacts.report
    lines = ["aggregates:"]
    for name, value in sorted(report.aggregates.items()):
        lines.append(f"  {name:<10} {value:.6f}  (excluded {report.excluded.get(name, 0)})")
    lines.append(f"rows: {len(report.rows)}  failures: {len(artifacts.failures)}")
    if artifacts.tag_distribution:
        lines.append("failure tags among incorrect predictions:")
        for tag, share in sorted(artifacts.tag_distribution.items()):
            lines.append(f"  {tag:<28} {share:.3f}")
    header = "  ".join(c.ljust(10) for c in CSV_COLUMNS)
    lines.append(header)
    for row in report.rows:
        record = row.to_dict()
        lines.append(
            "  ".join(
                ("" if record[c] is None else str(record[c])).ljust(10) for c in CSV_COLUMNS
            )
        )
    return "\n".join(lines) + "\n"


# --- failure tags ----------------------------------------------------------------------

def attach_failure_tags(artifacts: RunArtifacts, annotation_file: str | Path) -> RunArtifacts:
    """Join human annotations {id, tag} onto the rows.

    Tags describe failures: annotating a correct prediction logs a warning.
    The per-tag distribution is computed among incorrect predictions.
    """
    known_ids = {row.id for row in artifacts.rows}
    annotations: dict[str, str] = {}
    path = Path(annotation_file)
    for row_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON: {exc.msg}", row=row_number) from exc
        sample_id, tag = str(record.get("id")), record.get("tag")
        if sample_id not in known_ids:
            raise DatasetError(f"unknown sample id {sample_id!r}", row=row_number)
        if tag not in FAILURE_TAGS:
            raise DatasetError(f"unknown tag {tag!r}", row=row_number)
        annotations[sample_id] = tag

    tagged_rows: list[SampleRow] = []
    for row in artifacts.rows:
        tag = annotations.get(row.id)
        if tag is None:
            tagged_rows.append(row)
            continue
        if row.correct:
            logger.warning("tag %s on correct prediction %s (tags describe failures)", tag, row.id)
        tagged_rows.append(replace(row, failure_tag=tag, tag_source="human-annotation-file"))

    incorrect = [row for row in tagged_rows if row.correct is False]
    distribution: dict[str, float] = {}
    if incorrect:
        for tag in FAILURE_TAGS:
            if tag == "none":
                continue  # untagged errors are not a failure category
            count = sum(1 for row in incorrect if row.failure_tag == tag)
            if count:
                distribution[tag] = count / len(incorrect)
    artifacts.rows = tagged_rows
    artifacts.report = aggregate(tagged_rows)
    artifacts.tag_distribution = distribution
    return artifacts
