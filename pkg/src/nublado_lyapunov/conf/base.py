import dataclasses

from nublado_lyapunov.exceptions import ImproperlyConfigured


class AppSettings:
    """
    Defaults merged with the `[<settings_dict_name>]` table of an experiment
    file into the frozen `cls` dataclass. The dataclass validates its values.
    """

    def __init__(self, *, defaults, settings_dict_name, cls):
        self.defaults = dict(defaults)
        self.settings_dict_name = settings_dict_name
        self.cls = cls
        self.configure()

    def configure(self, overrides=None):
        """
        Rebuild the settings from the defaults and these overrides.
        """
        overrides = dict(overrides or {})
        unknown = sorted(set(overrides) - set(self.defaults))
        if unknown:
            raise ImproperlyConfigured(f"Unknown setting(s): {', '.join(unknown)}", field=self.settings_dict_name)
        self.data = self.cls(**{**self.defaults, **overrides})

    def as_dict(self):
        return dataclasses.asdict(self.data)

    def __getattr__(self, name):
        if name == "data" or name.startswith("_"):
            raise AttributeError(name)
        return getattr(self.data, name)
