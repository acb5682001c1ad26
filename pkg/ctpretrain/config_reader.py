"""Config reader for ctpretrain"""

from ast import literal_eval
import glob
import logging
import os
import string

from addict import Dict
import yaml

from . import ConfigReadError, ConfigValueError


class ConfigReader:
    """Reads a file or folder of yaml configuration files"""

    def __init__(self, file, raw=False, overrides=()):
        """Parse the specified file or folder into self.config

        ``overrides`` are ``key.path=value`` strings applied after reading,
        with values parsed as yaml scalars.
        """
        self.config = None
        self.config_raw = {}

        if file is None:
            filelist = []
        elif os.path.isdir(file):
            filelist = sorted(glob.glob(os.path.join(file, "*.yml")))
        elif os.path.isfile(file):
            filelist = [file]
        else:
            raise ConfigReadError(file, "no such file or folder")

        for current_file in filelist:
            with open(current_file, "r", encoding="utf-8") as config_file:
                try:
                    loaded = yaml.safe_load(config_file)
                except (yaml.YAMLError, ValueError) as exc:
                    raise ConfigReadError(current_file, str(exc)) from exc
            if loaded is None:
                continue
            if not isinstance(loaded, dict):
                raise ConfigReadError(current_file, "top level must be a mapping")
            logging.debug("Read config file %s", current_file)
            self.config_raw.update(loaded)

        for override in overrides:
            apply_override(self.config_raw, override)

        if not raw:
            try:
                config_dict = literal_eval(
                    string.Template(str(self.config_raw)).substitute(**os.environ)
                )
            except KeyError as exc:
                raise ConfigReadError(
                    file, f"environment variable {exc} used in the config wasn't provided"
                ) from exc
            self.config = Dict(config_dict)
        else:
            self.config = Dict(self.config_raw)

    def print(self):
        """Print the current configuration to the terminal"""
        print(yaml.dump(self.config.to_dict(), default_flow_style=False, default_style=""))

    def print_raw(self):
        """Print the current configuration, without templating environment variables"""
        print(yaml.dump(self.config_raw, default_flow_style=False, default_style=""))


def apply_override(config: dict, override: str):
    """Set ``a.b.c=value`` inside a nested dict, creating intermediate mappings"""
    key_path, sep, value = override.partition("=")
    if not sep or not key_path:
        raise ConfigValueError("--set", override, "expected key.path=value")
    keys = key_path.strip().split(".")
    node = config
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = node[key] = {}
        node = child
    try:
        node[keys[-1]] = yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigValueError(key_path, value, str(exc)) from exc
    logging.debug("Config override %s=%r", key_path, node[keys[-1]])
