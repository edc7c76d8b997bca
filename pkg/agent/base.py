"""Abstract agent backend contract."""
from abc import ABC, abstractmethod

import numpy as np

from app.models import PromptBundle


class AgentBackend(ABC):
    """One committee seat's reply generator.

    Scripted and synthetic backends must be pure functions of the prompt and
    the state of the rng stream handed to them; remote backends are not.
    """

    deterministic: bool = True

    def __init__(self, descriptor: str):
        """Initialize the backend.

        Args:
            descriptor: Model identifier recorded in run records
        """
        self.descriptor = descriptor

    @abstractmethod
    async def respond(
        self, prompt: PromptBundle, temperature: float, rng: np.random.Generator
    ) -> str:
        """Return the raw reply text for one call."""
        pass

    async def aclose(self) -> None:
        """Release held resources."""
        return None

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.descriptor!r})"
