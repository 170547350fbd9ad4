"""Utility-gating middleware between a user and a hosted LLM."""

from .chat import ChatEndpointConfig, EndpointError, HttpChatClient, render_task
from .service import GateDecision, Gateway, GatewayConfig, GatewayError, TaskRequest, decide
from .store import SanitizationCache, TrainingLog, cache_key, read_training_log, records_to_dataset

__all__ = [
    "ChatEndpointConfig",
    "EndpointError",
    "HttpChatClient",
    "render_task",
    "GateDecision",
    "Gateway",
    "GatewayConfig",
    "GatewayError",
    "TaskRequest",
    "decide",
    "SanitizationCache",
    "TrainingLog",
    "cache_key",
    "read_training_log",
    "records_to_dataset",
]
