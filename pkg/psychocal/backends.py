import json
import logging
import os
import queue
import re
import subprocess
import threading
from abc import abstractmethod
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import openai
import requests
from langchain_core.output_parsers.string import StrOutputParser
from langchain_openai import ChatOpenAI

from psychocal.errors import BackendError, DomainError
from psychocal.irt_core import ItemParams
from psychocal.prompts import PromptTemplate, format_ability
from psychocal.sim_engine import (
    BackendBinding,
    DecodingConfig,
    GeneratorBackend,
    Item,
    NoisyScorer,
    ScorerBackend,
    SimulationPlan,
    SyntheticOracleGenerator,
    SyntheticOracleScorer,
)

logger = logging.getLogger(__name__)

SCORE_PATTERN = re.compile(r"-?\d+")


def student_prompt_values(item: Item, theta: float) -> Dict[str, str]:
    return {
        "passage": item.passage,
        "question": item.question,
        "ability": format_ability(theta),
    }


def scorer_prompt_values(item: Item, response_text: str) -> Dict[str, Any]:
    return {
        "passage": item.passage,
        "question": item.question,
        "rubric": item.rubric,
        "response": response_text,
        "max_score": item.num_categories - 1,
    }


def _cell_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


class JsonRequestBackend(GeneratorBackend, ScorerBackend):
    """
    Shared request building for backends that speak the JSON protocol:
    {"kind": "generate" | "score", "item": {...}, "theta": ..., "text": ..., "decoding": {...}}
    answered by {"ok": true, "text": ...}, {"ok": true, "score": k} or {"ok": false, "error": ...}.
    Requests also carry the rendered chat messages and a per-cell seed.

    Args:
        student_prompt (PromptTemplate, optional): Simulated-student prompt. Defaults to the packaged one.
        scorer_prompt (PromptTemplate, optional): Scorer prompt. Defaults to the packaged one.
    """

    def __init__(
        self,
        student_prompt: Optional[PromptTemplate] = None,
        scorer_prompt: Optional[PromptTemplate] = None,
    ) -> None:
        self.student_prompt = student_prompt or PromptTemplate.packaged("student")
        self.scorer_prompt = scorer_prompt or PromptTemplate.packaged("scorer")

    @abstractmethod
    def _send(self, kind: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        """
        Deliver one request and return the decoded reply.
        """

    def _checked(self, reply: Any) -> Dict[str, Any]:
        if not isinstance(reply, dict):
            raise BackendError(f"unexpected backend reply: {reply!r}")
        if not reply.get("ok"):
            raise BackendError(str(reply.get("error", "backend reported a failure")))
        return reply

    def generate(
        self, item: Item, theta: float, decoding: DecodingConfig, rng: np.random.Generator
    ) -> str:
        payload = {
            "kind": "generate",
            "item": item.model_dump(),
            "theta": theta,
            "decoding": decoding.model_dump(),
            "seed": _cell_seed(rng),
            "messages": self.student_prompt.format_chat(**student_prompt_values(item, theta)),
        }
        reply = self._checked(self._send("generate", payload))
        if not isinstance(reply.get("text"), str):
            raise BackendError("generate reply has no text")
        return reply["text"]

    def score(self, item: Item, response_text: str, rng: np.random.Generator) -> int:
        payload = {
            "kind": "score",
            "item": item.model_dump(),
            "text": response_text,
            "messages": self.scorer_prompt.format_chat(
                **scorer_prompt_values(item, response_text)
            ),
        }
        reply = self._checked(self._send("score", payload))
        try:
            return int(reply["score"])
        except (KeyError, TypeError, ValueError):
            raise BackendError(f"score reply has no integer score: {reply!r}") from None


class SubprocessBackend(JsonRequestBackend):
    """
    Talks to a long-running worker process: one JSON request per line on its stdin,
    one JSON reply per line on its stdout. The worker is (re)started on demand and
    requests are serialized. Any failed exchange (i/o error, timeout, a line that is
    not JSON) stops the worker, so a late reply is never read as the answer to the
    next request.

    Args:
        command (list of str): The worker command line.
        timeout_seconds (float, optional): How long to wait for each reply. Defaults to 60.
    """

    def __init__(
        self, command: Sequence[str], timeout_seconds: float = 60.0, **prompts: Any
    ) -> None:
        super().__init__(**prompts)
        if not command:
            raise DomainError("subprocess backend needs a command")
        if timeout_seconds <= 0:
            raise DomainError("timeout_seconds must be positive")
        self.__command = list(command)
        self.__timeout = timeout_seconds
        self.__process: Optional[subprocess.Popen] = None
        self.__replies: "queue.Queue[Optional[str]]" = queue.Queue()
        self.__lock = threading.Lock()

    def __start(self) -> None:
        logger.info("Starting backend worker: %s", " ".join(self.__command))
        try:
            process = subprocess.Popen(
                self.__command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as e:
            raise BackendError(f"cannot start backend worker: {e}") from e
        replies: "queue.Queue[Optional[str]]" = queue.Queue()
        threading.Thread(
            target=self.__read_replies, args=(process, replies), daemon=True
        ).start()
        self.__process = process
        self.__replies = replies

    @staticmethod
    def __read_replies(
        process: subprocess.Popen, replies: "queue.Queue[Optional[str]]"
    ) -> None:
        try:
            for line in process.stdout:
                replies.put(line)
        except (OSError, ValueError):
            pass
        replies.put(None)

    def __stop(self) -> None:
        if self.__process is None:
            return
        if self.__process.poll() is None:
            self.__process.kill()
            self.__process.wait()
        try:
            self.__process.stdin.close()
        except OSError:
            pass
        self.__process = None

    def _send(self, kind: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        with self.__lock:
            if self.__process is None or self.__process.poll() is not None:
                self.__stop()
                self.__start()
            try:
                self.__process.stdin.write(json.dumps(payload, sort_keys=True) + "\n")
                self.__process.stdin.flush()
                line = self.__replies.get(timeout=self.__timeout)
            except queue.Empty:
                self.__stop()
                raise BackendError(
                    f"backend worker gave no reply within {self.__timeout}s"
                ) from None
            except (OSError, ValueError) as e:
                self.__stop()
                raise BackendError(f"backend worker i/o failed: {e}") from e
            if line is None:
                self.__stop()
                raise BackendError("backend worker closed its output")
            try:
                return json.loads(line)
            except json.JSONDecodeError:
                self.__stop()
                raise BackendError(
                    f"bad json from backend worker: {line.strip()[:80]}"
                ) from None

    def close(self) -> None:
        with self.__lock:
            if self.__process is not None and self.__process.poll() is None:
                self.__process.stdin.close()
                try:
                    self.__process.wait(timeout=10)
                except subprocess.TimeoutExpired:
                    self.__process.kill()
                    self.__process.wait()
            self.__process = None


class HttpBackend(JsonRequestBackend):
    """
    Posts requests to <url>/generate and <url>/score.

    Args:
        url (str): Base URL of the service.
        timeout_seconds (float, optional): Per-request timeout. Defaults to 60.
    """

    def __init__(self, url: str, timeout_seconds: float = 60.0, **prompts: Any) -> None:
        super().__init__(**prompts)
        if not url:
            raise DomainError("http backend needs a url")
        self.__url = url.rstrip("/")
        self.__timeout = timeout_seconds

    def _send(self, kind: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        try:
            response = requests.post(f"{self.__url}/{kind}", json=payload, timeout=self.__timeout)
            response.raise_for_status()
            return response.json()
        except (requests.RequestException, ValueError) as e:
            raise BackendError(f"http backend request failed: {e}") from e


class ChatBackend(GeneratorBackend, ScorerBackend):
    """
    Simulated student and scorer served by an OpenAI-compatible chat endpoint
    (e.g. finetuned models behind a vLLM server). The scorer reply is parsed as a
    single integer.

    Args:
        model (str): Model name.
        decoding (DecodingConfig): Sampling settings for generation.
        base_url (str, optional): Endpoint URL; the OpenAI API if None. Defaults to None.
        timeout_seconds (float, optional): Request timeout. Defaults to 60.
        student_prompt (PromptTemplate, optional): Simulated-student prompt. Defaults to the packaged one.
        scorer_prompt (PromptTemplate, optional): Scorer prompt. Defaults to the packaged one.
    """

    def __init__(
        self,
        model: str,
        decoding: DecodingConfig,
        base_url: Optional[str] = None,
        timeout_seconds: float = 60.0,
        student_prompt: Optional[PromptTemplate] = None,
        scorer_prompt: Optional[PromptTemplate] = None,
    ) -> None:
        api_key = os.environ.get("OPENAI_API_KEY", "EMPTY")
        self.__generator_llm = ChatOpenAI(
            model=model,
            base_url=base_url,
            api_key=api_key,
            temperature=decoding.temperature,
            top_p=decoding.top_p,
            max_tokens=decoding.max_tokens,
            timeout=timeout_seconds,
            max_retries=0,
        )
        self.__scorer_llm = ChatOpenAI(
            model=model,
            base_url=base_url,
            api_key=api_key,
            temperature=0.0,
            max_tokens=8,
            timeout=timeout_seconds,
            max_retries=0,
        )
        self.__student_prompt = student_prompt or PromptTemplate.packaged("student")
        self.__scorer_prompt = scorer_prompt or PromptTemplate.packaged("scorer")

    def generate(
        self, item: Item, theta: float, decoding: DecodingConfig, rng: np.random.Generator
    ) -> str:
        messages = self.__student_prompt.format_messages(**student_prompt_values(item, theta))
        chain = self.__generator_llm.bind(seed=_cell_seed(rng)) | StrOutputParser()
        try:
            return chain.invoke(messages).strip()
        except openai.OpenAIError as e:
            raise BackendError(f"chat generation failed: {e}") from e

    def score(self, item: Item, response_text: str, rng: np.random.Generator) -> int:
        messages = self.__scorer_prompt.format_messages(
            **scorer_prompt_values(item, response_text)
        )
        chain = self.__scorer_llm | StrOutputParser()
        try:
            reply = chain.invoke(messages)
        except openai.OpenAIError as e:
            raise BackendError(f"chat scoring failed: {e}") from e
        match = SCORE_PATTERN.search(reply)
        if match is None:
            raise BackendError(f"scorer reply is not an integer: {reply[:40]!r}")
        return int(match.group())


def _build_one(
    binding: BackendBinding,
    role: str,
    plan: SimulationPlan,
    truth: Optional[Mapping[str, ItemParams]],
    prompts: Dict[str, Any],
):
    if binding.kind == "synthetic":
        if role == "scorer":
            return SyntheticOracleScorer()
        if truth is None:
            raise DomainError("the synthetic generator needs ground-truth item parameters")
        return SyntheticOracleGenerator(truth, ability_blind=binding.ability_blind)
    if binding.kind == "subprocess":
        return SubprocessBackend(binding.command or [], binding.timeout_seconds, **prompts)
    if binding.kind == "http":
        return HttpBackend(binding.url or "", binding.timeout_seconds, **prompts)
    if binding.kind == "chat":
        if not binding.model:
            raise DomainError("the chat backend needs a model name")
        return ChatBackend(
            binding.model,
            plan.decoding,
            base_url=binding.base_url,
            timeout_seconds=binding.timeout_seconds,
            **prompts,
        )
    raise DomainError(f"unknown backend kind: {binding.kind}")


def build_backends(
    plan: SimulationPlan,
    truth: Optional[Mapping[str, ItemParams]] = None,
    student_prompt: Optional[PromptTemplate] = None,
    scorer_prompt: Optional[PromptTemplate] = None,
) -> Tuple[GeneratorBackend, ScorerBackend]:
    """
    Instantiate the generator and scorer a simulation plan binds to. Identical
    generator and scorer bindings share one backend; a positive scorer flip_prob
    wraps the scorer in a NoisyScorer.

    Args:
        plan (SimulationPlan): The simulation plan.
        truth (dict, optional): Ground-truth item parameters for the synthetic generator. Defaults to None.
        student_prompt (PromptTemplate, optional): Simulated-student prompt for external backends. Defaults to None.
        scorer_prompt (PromptTemplate, optional): Scorer prompt for external backends. Defaults to None.

    Returns:
        tuple: (generator, scorer)
    """
    prompts = {"student_prompt": student_prompt, "scorer_prompt": scorer_prompt}
    generator = _build_one(plan.generator, "generator", plan, truth, prompts)

    scorer_binding = plan.scorer.model_copy(update={"flip_prob": 0.0, "ability_blind": False})
    generator_binding = plan.generator.model_copy(update={"flip_prob": 0.0, "ability_blind": False})
    if scorer_binding.kind != "synthetic" and scorer_binding == generator_binding:
        scorer = generator
    else:
        scorer = _build_one(plan.scorer, "scorer", plan, truth, prompts)

    if plan.scorer.flip_prob > 0:
        scorer = NoisyScorer(scorer, plan.scorer.flip_prob)
    return generator, scorer
