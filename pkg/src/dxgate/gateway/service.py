"""Utility-gating middleware.

Per request: sanitize the prompt (reusing any stored sanitization for the same
prompt and epsilon), run the task on the local SLM for both the original and
the sanitized prompt, predict the LLM's utility from similarity features, and
forward the sanitized prompt to the LLM only if the prediction clears the
quality threshold. Otherwise the SLM's result on the original prompt is
returned and the LLM is never contacted.
"""

from __future__ import annotations

import json
import logging
import secrets
import time
import uuid
from dataclasses import asdict, dataclass, field
from typing import Literal

from pydantic import BaseModel, Field, model_validator

from ..embedding_store import EmbeddingModel, load_binary
from ..mechanism import RANK_SAMPLED, SanitizationConfig, sanitize_text
from ..quality import (FeatureVector, MemoizedProvider, ProviderError, compute_features, make_provider,
                       realized_target)
from ..regressor import GbdtModel, load_model, predict
from ..tokenize import detokenize, tokenize_words
from .chat import ChatClient, ChatEndpointConfig, EndpointError, HttpChatClient, render_task
from .store import SanitizationCache, TrainingLog, cache_key

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.6


class TaskRequest(BaseModel):
    prompt: str = Field(min_length=1)
    task: Literal["summarize", "translate", "custom"] = "summarize"
    target_language: str | None = None
    instruction: str | None = None
    epsilon: float = Field(gt=0)
    tau: float | None = Field(default=None, ge=-1.0, le=1.0)
    correct_prompts: bool = False
    metadata: dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def _task_fields(self):
        if self.task == "translate" and not self.target_language:
            raise ValueError("translate tasks need target_language")
        if self.task == "custom" and (not self.instruction or "{text}" not in self.instruction):
            raise ValueError("custom tasks need an instruction containing {text}")
        return self


@dataclass
class GateDecision:
    decision: str  # "forward" | "abort"
    predicted_e: float
    tau: float
    features: FeatureVector
    sanitized_prompt: str
    slm_result: str
    slm_result_sanitized: str
    llm_result: str | None = None
    realized_e: float | None = None
    cache_hit: bool = False
    corrected: bool = False
    flags: list[str] = field(default_factory=list)
    request_id: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


class GatewayError(RuntimeError):
    status = 502

    def __init__(self, message: str, decision: GateDecision | None = None, fallback: str | None = None):
        super().__init__(message)
        self.decision = decision
        self.fallback = fallback


@dataclass
class GatewayConfig:
    embedding_model_path: str
    regressor_path: str
    slm: ChatEndpointConfig
    llm: ChatEndpointConfig
    embedding_provider: dict = field(default_factory=lambda: {"kind": "mock"})
    tau: float = DEFAULT_TAU
    variant: str = RANK_SAMPLED
    nn_backend: str = "exact"
    oov_policy: str = "error"
    tail_mass_delta: float = 1e-12
    seed: int | None = None  # None: a fresh random seed for every new sanitization
    lowercase: bool = True
    cache_path: str | None = None
    training_log_path: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "GatewayConfig":
        d = dict(d)
        d["slm"] = ChatEndpointConfig.from_dict({"role": "slm", **d["slm"]})
        d["llm"] = ChatEndpointConfig.from_dict({"role": "llm", **d["llm"]})
        cfg = cls(**d)
        if (cfg.slm.base_url, cfg.slm.model) == (cfg.llm.base_url, cfg.llm.model):
            raise ValueError("slm and llm must be distinct endpoints")
        return cfg

    @classmethod
    def from_file(cls, path) -> "GatewayConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class Gateway:
    def __init__(self, model: EmbeddingModel, regressor: GbdtModel, slm: ChatClient, llm: ChatClient,
                 provider, slm_config: ChatEndpointConfig | None = None,
                 llm_config: ChatEndpointConfig | None = None, tau: float = DEFAULT_TAU,
                 variant: str = RANK_SAMPLED, nn_backend: str = "exact", oov_policy: str = "error",
                 tail_mass_delta: float = 1e-12, seed: int | None = None, lowercase: bool = True,
                 cache: SanitizationCache | None = None, training_log: TrainingLog | None = None):
        self.model = model
        self.regressor = regressor
        self.slm = slm
        self.llm = llm
        self.provider = provider if isinstance(provider, MemoizedProvider) else MemoizedProvider(provider)
        self.slm_config = slm_config or ChatEndpointConfig("slm", "", "")
        self.llm_config = llm_config or ChatEndpointConfig("llm", "", "")
        self.tau = tau
        self.variant = variant
        self.nn_backend = nn_backend
        self.oov_policy = oov_policy
        self.tail_mass_delta = tail_mass_delta
        self.seed = seed
        self.lowercase = lowercase
        self.cache = SanitizationCache(None) if cache is None else cache
        self.training_log = TrainingLog(None) if training_log is None else training_log
        self.sanitizations = 0

    @classmethod
    def from_config(cls, cfg: GatewayConfig) -> "Gateway":
        provider_opts = dict(cfg.embedding_provider)
        kind = provider_opts.pop("kind")
        return cls(
            load_binary(cfg.embedding_model_path), load_model(cfg.regressor_path),
            HttpChatClient(cfg.slm), HttpChatClient(cfg.llm), make_provider(kind, **provider_opts),
            cfg.slm, cfg.llm, cfg.tau, cfg.variant, cfg.nn_backend, cfg.oov_policy,
            cfg.tail_mass_delta, cfg.seed, cfg.lowercase,
            SanitizationCache(cfg.cache_path), TrainingLog(cfg.training_log_path),
        )

    def set_regressor(self, regressor: GbdtModel) -> None:
        self.regressor = regressor

    # -- steps -------------------------------------------------------------

    def sanitize(self, prompt: str, epsilon: float) -> tuple[str, bool]:
        """Sanitized prompt for ``(prompt, epsilon)``, reusing the stored version if any."""
        ids, tmap = tokenize_words(prompt, self.model, self.lowercase, self.oov_policy)
        key = cache_key(prompt, epsilon, self.model.name, self.variant)

        def create():
            seed = self.seed if self.seed is not None else secrets.randbits(63)
            cfg = SanitizationConfig(epsilon, self.variant, self.nn_backend, self.oov_policy, seed,
                                     self.tail_mass_delta)
            st = sanitize_text(self.model, ids, cfg, oov_flags=[i < 0 for i in ids])
            self.sanitizations += 1
            return {"sanitized_ids": [int(x) for x in st.sanitized_token_ids]}

        value, hit = self.cache.get_or_create(key, create)
        return detokenize(value["sanitized_ids"], tmap, self.model), hit

    def correct_prompt(self, prompt: str, sanitized: str, epsilon: float) -> tuple[str, bool]:
        """SLM grammar/coherence pass; returns ``(text, corrected_ok)``.

        The corrected text is stored too, so the LLM never sees two corrections
        of one sanitization.
        """
        key = "corrected:" + cache_key(prompt, epsilon, self.model.name, self.variant)

        def create():
            messages, cap = render_task(self.slm_config, "correct", sanitized)
            return {"text": self.slm.chat(messages, cap)}

        try:
            value, _ = self.cache.get_or_create(key, create)
        except EndpointError as exc:
            log.warning("prompt correction failed, using the uncorrected prompt: %s", exc)
            return sanitized, False
        return value["text"], True

    def _run(self, client: ChatClient, config: ChatEndpointConfig, req: TaskRequest, text: str) -> str:
        messages, cap = render_task(config, req.task, text, req.target_language, req.instruction)
        return client.chat(messages, cap)

    def assess(self, req: TaskRequest) -> GateDecision:
        """Steps 1-4: sanitize, run the SLM twice, predict the LLM's utility."""
        tau = self.tau if req.tau is None else req.tau
        flags = []
        p_eps, hit = self.sanitize(req.prompt, req.epsilon)
        corrected = False
        if req.correct_prompts:
            p_eps, corrected = self.correct_prompt(req.prompt, p_eps, req.epsilon)
            if not corrected:
                flags.append("correction_failed")
        try:
            r_slm = self._run(self.slm, self.slm_config, req, req.prompt)
            r_slm_eps = self._run(self.slm, self.slm_config, req, p_eps)
            features = compute_features(req.prompt, p_eps, r_slm, r_slm_eps, req.epsilon, self.provider)
        except (EndpointError, ProviderError) as exc:
            raise GatewayError(str(exc)) from exc
        predicted = predict(self.regressor, features)
        features.target_e, features.target_kind = predicted, "predicted"
        return GateDecision(decide(predicted, tau), predicted, tau, features, p_eps, r_slm, r_slm_eps,
                            cache_hit=hit, corrected=corrected, flags=flags,
                            request_id=uuid.uuid4().hex)

    def handle_request(self, req: TaskRequest) -> GateDecision:
        """Full flow; forwards to the LLM only when the predicted utility reaches tau."""
        started = time.time()
        gd = self.assess(req)
        error = None
        if gd.decision == "forward":
            try:
                gd.llm_result = self._run(self.llm, self.llm_config, req, gd.sanitized_prompt)
            except EndpointError as exc:
                error = exc
                gd.flags.append("llm_failed")
            else:
                try:
                    gd.realized_e = realized_target(req.prompt, gd.llm_result, self.provider)
                except ProviderError as exc:
                    # the LLM result is still returned; the row just cannot train the regressor
                    log.warning("could not score the LLM result: %s", exc)
                    gd.flags.append("realized_e_unavailable")
        self._log(req, gd, started)
        if error is not None:
            raise GatewayError(str(error), decision=gd, fallback=gd.slm_result) from error
        return gd

    def _log(self, req: TaskRequest, gd: GateDecision, started: float) -> None:
        f = gd.features
        record = {
            "request_id": gd.request_id, "task": req.task, "started": started, "finished": time.time(),
            "epsilon": f.epsilon, "sim_b": f.sim_b, "sim_c": f.sim_c, "sim_d": f.sim_d,
            "predicted_e": gd.predicted_e, "realized_e": gd.realized_e, "decision": gd.decision,
            "tau": gd.tau, "cache_hit": gd.cache_hit, "corrected": gd.corrected,
        }
        try:
            self.training_log.append(record)
        except OSError as exc:
            log.warning("training log append failed: %s", exc)
            gd.flags.append("training_log_write_failed")


def decide(predicted_e: float, tau: float) -> str:
    return "forward" if predicted_e >= tau else "abort"
