"""Built-in prompt templates, selected by id on the wire.

These texts are part of the scoring protocol: clients send a prompt_id and
the service resolves it to the exact template below. Changing a template is
a protocol change and bumps PROMPTS_VERSION.
"""

PROMPTS_VERSION = 1

PROMPT_TEMPLATES: dict[str, str] = {
    "generic": (
        "You are given two images: a query and a candidate. Determine whether "
        "the candidate is similar to the query image.\n"
        "\n"
        "Output strictly a single digit:\n"
        "- 0 = the object instance does not appear.\n"
        "- 1 = the object instance appears in the candidate.\n"
        "Do not output anything else."
    ),
    "object": (
        "You are given two images: a query and a candidate. Determine whether "
        "the exact same object instance from the query image is present in the "
        "candidate image.\n"
        "- The instance must be the same, not just a similar object.\n"
        "- The instance may appear at a different scale, partially occluded, "
        "or among other objects.\n"
        "\n"
        "Output strictly a single digit:\n"
        "- 0 = the object instance does not appear.\n"
        "- 1 = the object instance appears in the candidate.\n"
        "Do not output anything else."
    ),
    "landmark": (
        "You are given two images: a query and a candidate. Determine whether "
        "the exact same landmark, building, or architectural detail from the "
        "query image is present in the candidate image.\n"
        "- The instance must be the same, not just a similar-looking building "
        "or structure.\n"
        "- The query image may show the entire landmark or just a specific, "
        "cropped part of it (like a doorway, statue, or window).\n"
        "- The instance in the candidate image may appear at a different "
        "scale, from a different viewpoint/angle, under different lighting, "
        "or be partially occluded.\n"
        "Output strictly a single digit:\n"
        "- 0 = the object instance does not appear.\n"
        "- 1 = the object instance appears in the candidate.\n"
        "Do not output anything else."
    ),
}
