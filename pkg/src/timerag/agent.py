"""Retrieval-augmented diagnosis agent with a bounded reflection loop.

The aligned representation enters the textual query as decoded per-patch
tokens plus metric metadata; retrieval runs over the rendered narrative's
embedding. Diagnose / self-evaluate / re-retrieve iterates at most five
times.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import AlignedRepresentation
from .errors import AgentError, TemplateError
from .llmclient import ChatClient, ChatRequest
from .metrics import MetricSample
from .ragstore import Chunk, VectorStore, retrieve_topk
from .templates import StrictFormatMap, load_template

log = logging.getLogger(__name__)

MAX_ITERATIONS = 5
GAP_RETRIEVAL_K = 3


@dataclass
class DiagnosticQuery:
    narrative: str
    metadata: list[dict]
    patch_tokens: list[list[str]]  # per sample, in time order
    query_embedding: np.ndarray


@dataclass
class DiagnosisReport:
    root_cause: str
    candidate_causes: list[str]
    evidence: list[str]  # chunk ids, subset of the retrieved set
    remediation_steps: list[str]
    iteration: int = 1

    def to_dict(self) -> dict:
        return {
            "root_cause": self.root_cause,
            "candidate_causes": self.candidate_causes,
            "evidence": self.evidence,
            "remediation_steps": self.remediation_steps,
            "iteration": self.iteration,
        }


@dataclass
class Evaluation:
    patterns_addressed: bool
    causes_align_history: bool
    actions_feasible: bool
    deficiencies: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.patterns_addressed and self.causes_align_history and self.actions_feasible


@dataclass
class IterationRecord:
    report: DiagnosisReport
    evaluation: Evaluation | None
    retrieved: list[tuple[str, float]]  # (chunk id, similarity)


def _metadata_entry(sample: MetricSample) -> list[dict]:
    if sample.raw_min is None or sample.raw_max is None:
        raise ValueError(f"sample {sample.id!r} must be normalized before query composition")
    return [
        {
            "name": name,
            "period_start": sample.period_start.isoformat(),
            "period_end": sample.period_end.isoformat(),
            "frequency_seconds": sample.frequency_seconds,
            "raw_min": float(sample.raw_min[f]),
            "raw_max": float(sample.raw_max[f]),
        }
        for f, name in enumerate(sample.metric_names)
    ]


def compose_query(
    aligned: AlignedRepresentation,
    samples: Sequence[MetricSample],
    table,
    embedder,
    template: str | None = None,
) -> DiagnosticQuery:
    """Render the diagnostic narrative and embed it for retrieval."""
    if aligned.decoded_tokens.shape[0] != len(samples):
        raise ValueError("one aligned row per sample required")
    template = template if template is not None else load_template("query_narrative.txt")

    metadata: list[dict] = []
    meta_lines: list[str] = []
    token_lines: list[str] = []
    patch_tokens: list[list[str]] = []
    for row, sample in zip(aligned.decoded_tokens, samples):
        entries = _metadata_entry(sample)
        metadata.extend(entries)
        for e in entries:
            meta_lines.append(
                f"- metric {e['name']} ({sample.id}): period {e['period_start']} to "
                f"{e['period_end']}, sampling every {e['frequency_seconds']:g}s, "
                f"observed minimum {e['raw_min']:g}, maximum {e['raw_max']:g}"
            )
        tokens = [table.tokens[t] for t in row]
        patch_tokens.append(tokens)
        token_lines.append(f"- {sample.id}: " + " ".join(tokens))

    narrative = template.format_map(
        StrictFormatMap(
            metadata_block="\n".join(meta_lines),
            token_block="\n".join(token_lines),
        )
    )
    unresolved = re.search(r"\{[A-Za-z_][A-Za-z_0-9]*\}", narrative)
    if unresolved:
        raise TemplateError(f"unresolved placeholder {unresolved.group(0)}")
    return DiagnosticQuery(narrative, metadata, patch_tokens, embedder(narrative))


def _context_block(retrieved: Sequence[tuple[Chunk, float]]) -> str:
    lines = []
    for chunk, sim in retrieved:
        lines.append(f"[chunk {chunk.id}] (similarity {sim:.3f})\n{chunk.text.strip()}")
    return "\n\n".join(lines)


_JSON_OBJECT = re.compile(r"\{.*\}", re.DOTALL)


def _parse_json_reply(client: ChatClient, messages: list[dict], max_reprompts: int = 2) -> dict:
    """Chat until the reply parses as a JSON object; bounded re-prompting."""
    transcript = list(messages)
    for _ in range(1 + max_reprompts):
        response = client.chat(ChatRequest(messages=list(transcript)))
        transcript.append({"role": "assistant", "content": response.content})
        text = response.content
        for candidate in (text, *(m.group(0) for m in [_JSON_OBJECT.search(text)] if m)):
            try:
                data = json.loads(candidate)
                if isinstance(data, dict):
                    return data
            except json.JSONDecodeError:
                continue
        transcript.append(
            {"role": "user", "content": "Respond with a single valid JSON object only."}
        )
    raise AgentError("LLM reply was not valid JSON after re-prompts", transcript=transcript)


def _as_str_list(value) -> list[str]:
    if isinstance(value, str):
        return [value]
    if isinstance(value, list):
        return [str(v) for v in value]
    return []


def diagnose_once(
    query: DiagnosticQuery,
    store: VectorStore,
    llm: ChatClient,
    k: int = 5,
    retrieved: Sequence[tuple[Chunk, float]] | None = None,
    iteration: int = 1,
    feedback: str | None = None,
) -> tuple[DiagnosisReport, list[tuple[Chunk, float]]]:
    """One retrieval + generation round; evidence restricted to retrieved ids."""
    if len(store) == 0:
        raise ValueError("vector store is empty")
    if retrieved is None:
        retrieved = retrieve_topk(query.query_embedding, store, k)
    prompt = load_template("diagnosis_prompt.txt").format_map(
        StrictFormatMap(narrative=query.narrative, context_block=_context_block(retrieved))
    )
    messages = [{"role": "user", "content": prompt}]
    if feedback:
        messages.append(
            {
                "role": "user",
                "content": "A self-evaluation of your previous report found deficiencies: "
                + feedback
                + " Regenerate the report addressing them.",
            }
        )
    data = _parse_json_reply(llm, messages)
    retrieved_ids = {chunk.id for chunk, _ in retrieved}
    evidence = []
    for cid in _as_str_list(data.get("evidence", [])):
        if cid in retrieved_ids:
            evidence.append(cid)
        else:
            log.warning("dropping evidence id %r: not in the retrieved set", cid)
    report = DiagnosisReport(
        root_cause=str(data.get("root_cause", "")),
        candidate_causes=_as_str_list(data.get("candidate_causes", [])),
        evidence=evidence,
        remediation_steps=_as_str_list(data.get("remediation_steps", [])),
        iteration=iteration,
    )
    return report, list(retrieved)


def self_evaluate(
    report: DiagnosisReport,
    query: DiagnosticQuery,
    retrieved: Sequence[tuple[Chunk, float]],
    llm: ChatClient,
) -> Evaluation:
    """Ask the model to judge its report against the three completeness criteria."""
    prompt = load_template("evaluation_prompt.txt").format_map(
        StrictFormatMap(
            narrative=query.narrative,
            context_block=_context_block(retrieved),
            report_json=json.dumps(report.to_dict(), indent=2),
        )
    )
    try:
        data = _parse_json_reply(llm, [{"role": "user", "content": prompt}])
    except AgentError:
        return Evaluation(False, False, False, ["evaluation unparseable"])
    return Evaluation(
        patterns_addressed=bool(data.get("patterns_addressed", False)),
        causes_align_history=bool(data.get("causes_align_history", False)),
        actions_feasible=bool(data.get("actions_feasible", False)),
        deficiencies=_as_str_list(data.get("deficiencies", [])),
    )


def _refine_retrieval(
    current: list[tuple[Chunk, float]],
    deficiencies: list[str],
    query: DiagnosticQuery,
    store: VectorStore,
    embedder,
    k_gap: int,
) -> list[tuple[Chunk, float]]:
    """Retrieve chunks targeting the evaluation gaps and swap them in for the
    lowest-similarity members of the current set, keeping its size fixed."""
    gap_text = " ".join(deficiencies).strip()
    if not gap_text:
        return current
    gap_embedding = embedder(gap_text)
    gap_hits = retrieve_topk(gap_embedding, store, min(k_gap, len(store)))
    have = {chunk.id for chunk, _ in current}
    fresh = [(c, s) for c, s in gap_hits if c.id not in have]
    if not fresh:
        return current
    kept = sorted(current, key=lambda cs: (-cs[1], cs[0].id))[: len(current) - len(fresh)]
    merged = kept + fresh
    merged.sort(key=lambda cs: (-cs[1], cs[0].id))
    return merged


def reflect_loop(
    query: DiagnosticQuery,
    store: VectorStore,
    llm: ChatClient,
    embedder,
    max_iterations: int = MAX_ITERATIONS,
    k: int = 5,
    k_gap: int = GAP_RETRIEVAL_K,
) -> tuple[DiagnosisReport, list[IterationRecord]]:
    """diagnose -> self-evaluate -> targeted re-retrieval, bounded iterations."""
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    trace: list[IterationRecord] = []
    retrieved: list[tuple[Chunk, float]] | None = None
    feedback: str | None = None
    report = None
    try:
        for iteration in range(1, max_iterations + 1):
            report, retrieved = diagnose_once(
                query, store, llm, k=k, retrieved=retrieved, iteration=iteration, feedback=feedback
            )
            evaluation = self_evaluate(report, query, retrieved, llm)
            trace.append(
                IterationRecord(report, evaluation, [(c.id, s) for c, s in retrieved])
            )
            if evaluation.passed or iteration == max_iterations:
                return report, trace
            retrieved = _refine_retrieval(
                retrieved, evaluation.deficiencies, query, store, embedder, k_gap
            )
            feedback = "; ".join(evaluation.deficiencies) or "unspecified deficiencies"
    except AgentError as exc:
        exc.trace = trace
        raise
    except Exception as exc:
        raise AgentError(str(exc), trace=trace) from exc
    return report, trace


def trace_to_dict(trace: Sequence[IterationRecord]) -> list[dict]:
    return [
        {
            "report": rec.report.to_dict(),
            "evaluation": None
            if rec.evaluation is None
            else {
                "patterns_addressed": rec.evaluation.patterns_addressed,
                "causes_align_history": rec.evaluation.causes_align_history,
                "actions_feasible": rec.evaluation.actions_feasible,
                "deficiencies": rec.evaluation.deficiencies,
                "passed": rec.evaluation.passed,
            },
            "retrieved": [{"chunk_id": cid, "similarity": sim} for cid, sim in rec.retrieved],
        }
        for rec in trace
    ]
