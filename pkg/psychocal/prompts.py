import os
from pathlib import Path
from typing import Any, Dict, List, Set, Union

import yaml
from langchain_core.messages import BaseMessage
from langchain_core.prompts import ChatPromptTemplate
from pydantic import BaseModel

from psychocal.errors import DomainError

HERE = Path(os.path.abspath(__file__)).parent
PROMPT_DIR = HERE / "conf/prompts"


def format_ability(theta: float) -> str:
    """Abilities enter prompts as text rounded to 4 decimal places."""
    return f"{theta:.4f}"


class PromptTemplate(BaseModel):
    """
    A chat prompt made of an optional system message and a user message, both with
    named placeholders such as {passage}, {question} or {ability}.
    """

    system: str = ""
    user: str

    def _chat_template(self) -> ChatPromptTemplate:
        messages = []
        if self.system:
            messages.append(("system", self.system))
        messages.append(("user", self.user))
        return ChatPromptTemplate.from_messages(messages)

    @property
    def placeholders(self) -> Set[str]:
        return set(self._chat_template().input_variables)

    def check_placeholders(self, available: Set[str]) -> None:
        """
        Raises:
            DomainError: If the template uses a placeholder that is not available.
        """
        missing = self.placeholders - set(available)
        if missing:
            raise DomainError(f"unresolvable prompt placeholders: {sorted(missing)}")

    def format_messages(self, **values: Any) -> List[BaseMessage]:
        self.check_placeholders(set(values))
        return self._chat_template().format_messages(**values)

    def format_chat(self, **values: Any) -> List[Dict[str, str]]:
        """
        Render the template as a list of {"role", "content"} dicts.
        """
        roles = {"system": "system", "human": "user", "ai": "assistant"}
        return [
            {"role": roles.get(message.type, message.type), "content": message.content}
            for message in self.format_messages(**values)
        ]

    def format(self, **values: Any) -> str:
        """
        Render the template as a single string (system text, blank line, user text).
        """
        return "\n\n".join(message["content"] for message in self.format_chat(**values))

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "PromptTemplate":
        """
        Load a template. YAML files provide "system" and "user" keys; any other
        file is read as UTF-8 text and used as the user message.

        Args:
            path (str | Path): The template file.

        Returns:
            PromptTemplate: The loaded template.
        """
        path = Path(path)
        with open(path, "r", encoding="utf-8") as template_file:
            if path.suffix in (".yaml", ".yml"):
                return cls(**yaml.safe_load(template_file))
            return cls(user=template_file.read())

    @classmethod
    def packaged(cls, name: str) -> "PromptTemplate":
        return cls.from_file(PROMPT_DIR / f"{name}.yaml")
