from .errors import ConfigError


class AttrDict(dict):
    """
    A dict subclass enabling attribute style access to items.

    Used for the flat key-value records read from config, params and result
    files. Besides the usual mapping behaviour it remembers the line each key
    came from, so that later validation can point the user at the culprit.

    Methods:
        __getattr__(key): Allows accessing items as attributes.
        __setattr__(key, value): Allows setting items as attributes.
        __delattr__(key): Allows deleting items as attributes.
        from_key_values(text, source): Parses 'key = value' lines.
        line_of(key): Returns the line a key was read from.
        check_known(known, source): Raises on keys outside the known set.
    """
    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(f"{type(self).__name__} has no attribute '{key}'")

    def __setattr__(self, key, value):
        self[key] = value

    def __delattr__(self, key):
        try:
            del self[key]
        except KeyError:
            raise AttributeError(f"{type(self).__name__} has no attribute '{key}'")

    @classmethod
    def from_key_values(cls, text, source="<string>"):
        """
        Parses flat 'key = value' text.

        Blank lines and lines starting with '#' are skipped. Values are kept as
        stripped strings; conversion is left to the caller.

        Args:
            text (str): The file content.
            source (str): Name used in error messages.

        Returns:
            AttrDict: The parsed items.

        Raises:
            ConfigError: On a line without '=', an empty key or a duplicate key.
        """
        items = cls()
        lines = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{source}:{lineno}: empty key")
            if key in items:
                raise ConfigError(f"{source}:{lineno}: duplicate key '{key}' (first set on line {lines[key]})")
            items[key] = value.strip()
            lines[key] = lineno
        # stored outside the mapping so it never shows up as a key
        object.__setattr__(items, "_lines", lines)
        return items

    def line_of(self, key):
        """
        Returns the 1-based line a key was read from, or None.
        """
        return getattr(self, "__dict__", {}).get("_lines", {}).get(key)

    def check_known(self, known, source="<string>"):
        """
        Raises ConfigError if any key is not in `known`.

        Args:
            known (Iterable[str]): The accepted keys.
            source (str): Name used in error messages.
        """
        known = set(known)
        for key in self:
            if key not in known:
                line = self.line_of(key)
                where = f"{source}:{line}" if line else source
                raise ConfigError(f"{where}: unknown key '{key}'")
