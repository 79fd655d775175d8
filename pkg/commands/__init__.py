"""
Experiment commands with auto-discovery.

Every sub-package of commands/ holds one ExperimentCommand subclass and is
registered under its folder name, with underscores turned into dashes
(lambda_path becomes "lambda-path").
"""

import importlib
import inspect
import logging
import os

from .base import ExperimentCommand

__all__ = ["ExperimentCommand", "discover_commands", "get_command_class"]

logger = logging.getLogger(__name__)

# Storage for discovered commands
_discovered_commands = {}


def discover_commands():
    """
    Find every experiment command.

    Returns:
        Dictionary mapping command names to command classes
    """
    if _discovered_commands:
        return _discovered_commands

    commands_dir = os.path.dirname(__file__)
    for item in sorted(os.listdir(commands_dir)):
        item_path = os.path.join(commands_dir, item)
        if not os.path.isdir(item_path) or item.startswith("_"):
            continue

        module = importlib.import_module(f"commands.{item}")
        for _, obj in inspect.getmembers(module, inspect.isclass):
            if issubclass(obj, ExperimentCommand) and obj is not ExperimentCommand:
                _discovered_commands[item.replace("_", "-")] = obj
                break
        else:
            logger.warning(f"No command class found in commands/{item}")

    return _discovered_commands


def get_command_class(name):
    """
    Get a command class by name.

    Args:
        name: Command name, e.g. "train" or "lambda-path"

    Returns:
        Command class or None if not found
    """
    return discover_commands().get(name)
