"""Error taxonomy shared by the pipeline, service, and CLI.

Exit codes: 2 configuration, 3 missing or stale artifact, 4 any other
pipeline failure. The service maps the same classes to HTTP 422, 424,
and 500.
"""


class PipelineError(RuntimeError):
    """A stage failed at runtime."""

    exit_code = 4


class ConfigError(PipelineError):
    """The experiment configuration is invalid."""

    exit_code = 2


class MissingArtifactError(PipelineError):
    """A prerequisite artifact is absent or fails its manifest checksum."""

    exit_code = 3
