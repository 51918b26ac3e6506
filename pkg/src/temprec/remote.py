"""HTTP plumbing shared by the chat-completion and embedding clients."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from typing import Any, Callable

import httpx

logger = logging.getLogger(__name__)


class RemoteConfigError(RuntimeError):
    """Non-retryable misconfiguration: bad credentials, bad model name, wrong dimension."""


class RemoteUnavailableError(RuntimeError):
    """The service kept failing after all retries."""


@dataclass(frozen=True)
class ServiceConfig:
    base_url: str
    api_key: str
    model: str
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    concurrency: int = 4

    @classmethod
    def from_env(cls, prefix: str, **overrides: Any) -> "ServiceConfig":
        base = os.environ.get(f"{prefix}_BASE", "").strip()
        model = os.environ.get(f"{prefix}_MODEL", "").strip()
        if not base or not model:
            raise RemoteConfigError(f"set {prefix}_BASE and {prefix}_MODEL (and {prefix}_KEY if required)")
        return cls(base_url=base, api_key=os.environ.get(f"{prefix}_KEY", "").strip(), model=model, **overrides)


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    config: ServiceConfig,
    sleep: Callable[[float], None] = time.sleep,
) -> dict:
    """POST with exponential-backoff retries on 5xx, 429 and transport errors.

    Any other 4xx is raised immediately as RemoteConfigError.
    """
    headers = {"Content-Type": "application/json"}
    if config.api_key:
        headers["Authorization"] = f"Bearer {config.api_key}"
    last: str = ""
    for attempt in range(config.max_retries):
        if attempt:
            sleep(config.backoff * 2 ** (attempt - 1))
        try:
            resp = client.post(url, json=payload, headers=headers, timeout=config.timeout)
        except httpx.TransportError as exc:
            last = f"{type(exc).__name__}: {exc}"
            logger.warning("request to %s failed (attempt %d): %s", url, attempt + 1, last)
            continue
        if resp.status_code == 429 or resp.status_code >= 500:
            last = f"HTTP {resp.status_code}"
            logger.warning("request to %s failed (attempt %d): %s", url, attempt + 1, last)
            continue
        if resp.status_code >= 400:
            raise RemoteConfigError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
        return resp.json()
    raise RemoteUnavailableError(f"{url} unavailable after {config.max_retries} attempts ({last})")


def endpoint(base_url: str, path: str) -> str:
    base = base_url.rstrip("/")
    return base if base.endswith(path) else f"{base}{path}"
