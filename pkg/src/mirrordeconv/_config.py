"""Shared helper for building config dataclasses from key=value mappings."""

from dataclasses import fields


def mapping_kwargs(cls, mapping, what="option"):
    """Coerce a {name: value} mapping to constructor kwargs for ``cls``.

    Values may be strings (from config files or CLI); unknown keys raise
    ValueError so typos fail loudly.
    """
    known = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, val in mapping.items():
        if key not in known:
            raise ValueError(f"unknown {what} {key!r}")
        f_type = known[key]
        if f_type is bool or f_type == "bool":
            if isinstance(val, str):
                if val.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(f"bad boolean for {key!r}: {val!r}")
                val = val.lower() in ("true", "1")
            else:
                val = bool(val)
        elif f_type is int or f_type == "int":
            val = int(val)
        elif f_type is str or f_type == "str":
            val = str(val)
        else:
            val = float(val)
        kwargs[key] = val
    return kwargs
