"""Experiment specs, the SFI-vs-dense runner and its report files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..attention import KvStore, ModelSpec, ToyModel, build_toy_model, load_weights, prefill
from ..core import (
    CacheLimits,
    SelectorConfig,
    TriggerConfig,
    config_from_mapping,
    default_config,
    dump_config,
    parse_key_values,
)
from ..errors import ConfigError, SFIError
from ..scheduler import RequestResult, run_dense, run_request
from .metrics import cosine, run_violations

SCHEMA_VERSION = 1
SUMMARY_COLUMNS = (
    "schema_version",
    "request",
    "prompt_len",
    "generated",
    "mode",
    "token_match_rate",  # fraction of positions where SFI and dense emit the same token
    "mean_cosine",  # mean cosine of SFI vs teacher-forced dense vocab logits
    "slow_fraction",  # slow steps / all steps
    "mean_retention",  # mean |I| / L over fast steps (1.0 when there are none)
    "flop_ratio",  # dense / SFI attention KV reads over decode steps
)
MODES = ("sfi", "dense", "both")
_MODEL_KEYS = {f.name for f in fields(ModelSpec)}
_RUN_KEYS = {"model_seed", "weights", "prompt_file", "n_prompts", "prompt_len", "prompt_seed", "max_new", "mode", "out"}
EXPERIMENT_KEYS = frozenset(_MODEL_KEYS | _RUN_KEYS)


@dataclass(frozen=True)
class ExperimentSpec:
    model: ModelSpec = field(default_factory=ModelSpec)
    model_seed: int = 0
    weights: Path | None = None
    prompt_file: Path | None = None
    n_prompts: int = 4  # synthetic prompts when no prompt_file is given
    prompt_len: int = 128
    prompt_seed: int = 0
    limits: CacheLimits = field(default_factory=CacheLimits)
    trigger: TriggerConfig = field(default_factory=lambda: default_config()[1])
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    max_new: int = 32
    mode: str = "both"
    out: Path = Path("out")

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError("mode must be sfi, dense or both", mode=self.mode)
        if self.max_new < 1:
            raise ConfigError("max_new must be >= 1", max_new=self.max_new)
        if self.prompt_file is None and (self.n_prompts < 1 or self.prompt_len < 1):
            raise ConfigError("synthetic prompts need n_prompts >= 1 and prompt_len >= 1")
        if self.selector.k_budget != self.limits.k_budget:
            raise ConfigError("selector and cache k_budget disagree")
        self.limits.check_context(self.model.max_positions)

    @classmethod
    def from_text(cls, text: str, source: str = "<string>", base_dir: Path | None = None,
                  config_text: str | None = None) -> "ExperimentSpec":
        """Parse a key=value experiment file.

        ``config_text`` (another key=value file holding selector, trigger and
        cache keys) is applied first; the experiment file overrides it.
        Relative paths resolve against ``base_dir``.
        """
        values = parse_key_values(text, source)
        base = default_config()
        if config_text is not None:
            base = config_from_mapping(parse_key_values(config_text, "<config>"), base)
        sel, trig, lim = config_from_mapping(values, base, extra_keys=EXPERIMENT_KEYS)
        base_dir = base_dir or Path(".")

        def path(key):
            if key not in values:
                return None
            p = Path(values[key])
            return p if p.is_absolute() else base_dir / p

        model_kw = {}
        for f in fields(ModelSpec):
            if f.name in values:
                try:
                    model_kw[f.name] = type(f.default)(values[f.name])
                except ValueError as exc:
                    raise ConfigError("bad value", key=f.name, value=values[f.name]) from exc
        run_kw = {}
        for key in ("model_seed", "n_prompts", "prompt_len", "prompt_seed", "max_new"):
            if key in values:
                try:
                    run_kw[key] = int(values[key])
                except ValueError as exc:
                    raise ConfigError("bad value", key=key, value=values[key]) from exc
        if "mode" in values:
            run_kw["mode"] = values["mode"]
        return cls(
            model=ModelSpec(**model_kw),
            weights=path("weights"),
            prompt_file=path("prompt_file"),
            out=path("out") or Path("out"),
            limits=lim,
            trigger=trig,
            selector=sel,
            **run_kw,
        )

    @classmethod
    def from_file(cls, path: str | Path, config: str | Path | None = None) -> "ExperimentSpec":
        path = Path(path)
        try:
            text = path.read_text()
            config_text = Path(config).read_text() if config is not None else None
        except OSError as exc:
            raise ConfigError(f"cannot read experiment file: {exc.strerror}", path=exc.filename) from exc
        return cls.from_text(text, str(path), base_dir=path.parent, config_text=config_text)

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "model_seed": self.model_seed,
            "weights": str(self.weights) if self.weights else None,
            "prompt_file": str(self.prompt_file) if self.prompt_file else None,
            "n_prompts": self.n_prompts,
            "prompt_len": self.prompt_len,
            "prompt_seed": self.prompt_seed,
            "max_new": self.max_new,
            "mode": self.mode,
            "config": dump_config(self.selector, self.trigger, self.limits),
        }


def read_prompts(path: str | Path, vocab_size: int | None = None) -> list[list[int]]:
    """One whitespace-separated token-id sequence per non-blank line."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read prompt file: {exc.strerror}", path=str(path)) from exc
    prompts = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            ids = [int(t) for t in line.split()]
        except ValueError as exc:
            raise ConfigError("non-integer token id", path=str(path), line=lineno) from exc
        if vocab_size is not None and any(not 0 <= t < vocab_size for t in ids):
            raise ConfigError("token id outside the vocabulary", path=str(path), line=lineno)
        prompts.append(ids)
    if not prompts:
        raise ConfigError("prompt file has no prompts", path=str(path))
    return prompts


def write_prompts(path: str | Path, prompts) -> None:
    Path(path).write_text("".join(" ".join(str(t) for t in p) + "\n" for p in prompts))


def synthetic_prompts(spec: ExperimentSpec) -> list[list[int]]:
    rng = np.random.default_rng(spec.prompt_seed)
    return [rng.integers(0, spec.model.vocab_size, size=spec.prompt_len).tolist() for _ in range(spec.n_prompts)]


def load_model(spec: ExperimentSpec) -> ToyModel:
    if spec.weights is not None:
        return load_weights(spec.weights)
    return build_toy_model(spec.model, seed=spec.model_seed)


def teacher_forced_logits(model: ToyModel, prompt, generated) -> np.ndarray:
    """Dense vocab logits at every decode step for a fixed token stream, ``(len(generated), V)``."""
    tokens = list(prompt) + list(generated[:-1])
    store = KvStore.for_model(model.spec, capacity=len(tokens), query_window=1)
    out = prefill(model, store, tokens, all_logits=True)
    return out.logits_vocab[len(prompt) - 1 :]


@dataclass
class RequestReport:
    request: int
    prompt_len: int
    generated: int
    mode: str
    token_match_rate: float | None
    mean_cosine: float | None
    slow_fraction: float | None
    mean_retention: float | None
    flop_ratio: float | None
    violations: list[str] = field(default_factory=list)

    def row(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return {k: ("" if d[k] is None else d[k]) for k in SUMMARY_COLUMNS}


@dataclass
class RunReport:
    spec: dict
    requests: list[RequestReport]
    aggregates: dict
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> str:
        return json.dumps(
            {"schema_version": SCHEMA_VERSION, "spec": self.spec, "requests": [asdict(r) for r in self.requests],
             "aggregates": self.aggregates, "violations": self.violations, "ok": self.ok},
            indent=2, sort_keys=True,
        ) + "\n"

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.requests:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
        return buf.getvalue()


def request_metrics(i: int, prompt, sfi: RequestResult | None, dense: RequestResult | None,
                    model: ToyModel, mode: str) -> RequestReport:
    spec = model.spec
    match = cos = slow = ret = ratio = None
    if sfi is not None:
        log = sfi.log
        slow = sum(r.type == "slow" for r in log) / len(log)
        fast = [r.support_size / r.prefix_len for r in log if r.type == "fast"]
        ret = float(np.mean(fast)) if fast else 1.0
        decode = [r for r in log if r.t > 0]
        dense_reads = sum(spec.n_layers * spec.n_kv_heads * r.prefix_len for r in decode)
        sfi_reads = sum(r.kv_reads for r in decode)
        ratio = dense_reads / sfi_reads if sfi_reads else 1.0
        ref = teacher_forced_logits(model, prompt, sfi.tokens)
        cos = float(np.mean([cosine(a, b) for a, b in zip(sfi.logits, ref)]))
    if sfi is not None and dense is not None:
        match = float(np.mean(np.array(sfi.tokens) == np.array(dense.tokens)))
    n = len((sfi or dense).tokens)
    return RequestReport(i, len(prompt), n, mode, match, cos, slow, ret, ratio)


def run_experiment(spec: ExperimentSpec, write: bool = True) -> RunReport:
    """Run every prompt through the configured paths and (optionally) write the report files."""
    model = load_model(spec)
    if spec.weights is not None and model.spec != spec.model:
        spec = replace(spec, model=model.spec)
    prompts = read_prompts(spec.prompt_file, model.spec.vocab_size) if spec.prompt_file else synthetic_prompts(spec)
    reports, steps, problems = [], [], []
    for i, prompt in enumerate(prompts):
        sfi = dense = None
        if spec.mode in ("sfi", "both"):
            sfi = run_request(prompt, spec.limits, spec.trigger, spec.selector, model, spec.max_new, keep_logits=True)
            bad = run_violations(sfi, spec.limits, spec.trigger)
            problems += [f"request {i}: {p}" for p in bad]
            steps += [dict(asdict(r), request=i, path="sfi") for r in sfi.log]
        if spec.mode in ("dense", "both"):
            dense = run_dense(prompt, model, spec.max_new)
            steps += [dict(asdict(r), request=i, path="dense") for r in dense.log]
        rep = request_metrics(i, prompt, sfi, dense, model, spec.mode)
        rep.violations = [p for p in problems if p.startswith(f"request {i}:")]
        reports.append(rep)

    def mean(key):
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        return float(np.mean(vals)) if vals else None

    aggregates = {k: mean(k) for k in SUMMARY_COLUMNS[5:]}
    aggregates["requests"] = len(reports)
    report = RunReport(spec.to_dict(), reports, aggregates, problems)
    if write:
        write_report(report, steps, spec.out)
    return report


def write_report(report: RunReport, steps: list[dict], out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "steps.jsonl").write_text("".join(json.dumps(s, sort_keys=True) + "\n" for s in steps))
        (out / "summary.csv").write_text(report.summary_csv())
    except OSError as exc:
        raise SFIError(f"cannot write report: {exc.strerror}", path=exc.filename) from exc
