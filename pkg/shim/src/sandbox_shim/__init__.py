"""Sandbox shim: limited execution of generated file scripts."""

from .shim import run_script, load_manifest

__all__ = ["run_script", "load_manifest"]
__version__ = "0.1.0"
