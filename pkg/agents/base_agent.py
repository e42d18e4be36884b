# agents/base_agent.py
"""Base Agent class for all pipeline agents of the experiment runner."""

from abc import ABC, abstractmethod
from typing import Any, Dict, Optional
import logging

from gppbed.errors import GppBedError

logging.basicConfig(level=logging.INFO)


class BaseAgent(ABC):
    """Abstract base class for all agents in the experiment pipeline."""

    def __init__(self, name: str, description: str):
        """Initialize base agent.

        Args:
            name: Agent name
            description: Agent description
        """
        self.name = name
        self.description = description
        self.logger = logging.getLogger(self.name)

    @abstractmethod
    def execute(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """Execute the agent's main task.

        Args:
            input_data: Input data for the agent

        Returns:
            Dictionary containing the agent's output and a 'status' field
        """
        pass

    def validate_input(self, input_data: Dict[str, Any], required_fields: list) -> bool:
        """Check that required fields are present in input.

        Args:
            input_data: Input data to validate
            required_fields: List of required field names

        Returns:
            True if all required fields are present
        """
        for field in required_fields:
            if field not in input_data:
                self.logger.error(f"Missing required field: {field}")
                return False
        return True

    def missing_fields(self, input_data: Dict[str, Any], required_fields: list) -> Optional[Dict[str, Any]]:
        """Failure dictionary when required fields are absent, otherwise None."""
        if self.validate_input(input_data, required_fields):
            return None
        missing = [f for f in required_fields if f not in input_data]
        return {"error": f"Missing required fields: {missing}", "kind": "input", "status": "failed"}

    def numerical_failure(self, exc: GppBedError) -> Dict[str, Any]:
        """Wrap a library exception into the agent failure shape."""
        self.logger.error(f"[{self.name}] {type(exc).__name__}: {exc}")
        return {"error": str(exc), "kind": "numerical", "diagnostic": exc.to_dict(), "status": "failed"}

    def log_execution(self, message: str):
        """Log agent execution details."""
        self.logger.info(f"[{self.name}] {message}")
