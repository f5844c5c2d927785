import json
import re


def parse_override(text):
    """
    Parses a command-line override of the form ``section.key=value``.

    The value is read as a JSON literal when it is one, otherwise it is kept
    as a string.

    Example:
        'data.max_disp=2' -> (['data', 'max_disp'], 2)
        'gradient.damping=gate' -> (['gradient', 'damping'], 'gate')
    """
    match = re.match(r'^(?P<path>[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)*)=(?P<value>.*)$', text.strip())

    if match:
        parts = match.groupdict()
        keys = parts['path'].split('.')
        try:
            value = json.loads(parts['value'])
        except json.JSONDecodeError:
            value = parts['value']
        return keys, value
    else:
        raise ValueError(f"Invalid override format: {text!r} (expected key.path=value)")


def apply_overrides(raw, overrides):
    """Applies ``key.path=value`` overrides to a nested dict in place and returns it."""
    for text in overrides or ():
        keys, value = parse_override(text)
        node = raw
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ValueError(f"Override {text!r} descends into non-section key '{key}'")
            node = child
        node[keys[-1]] = value
    return raw
