"""Exception types shared across ragnet modules."""


class RagnetError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 4


class ConfigError(RagnetError, ValueError):
    exit_code = 2


class IngestError(RagnetError):
    exit_code = 2

    def __init__(self, path, reason="unreadable"):
        self.path = str(path)
        super().__init__(f"{reason}: {self.path}")


class DuplicateDocument(RagnetError):
    exit_code = 2

    def __init__(self, doc_id):
        self.doc_id = doc_id
        super().__init__(f"duplicate doc_id: {doc_id}")


class TokenizerUnavailable(RagnetError):
    exit_code = 3


class EmbedderUnavailable(RagnetError):
    exit_code = 3


class EmptyQuery(RagnetError, ValueError):
    exit_code = 2

    def __init__(self, msg="query is empty"):
        super().__init__(msg)


class StaleIndex(RagnetError):
    exit_code = 2


class InstanceTooLarge(RagnetError, ValueError):
    pass


class BackendUnavailable(RagnetError):
    exit_code = 3


class BackendProtocolError(RagnetError):
    exit_code = 3


class ScriptError(ConfigError):
    pass


class JudgeParseError(RagnetError):
    exit_code = 3


class QuestionSchemaError(RagnetError):
    exit_code = 2

    def __init__(self, line, reason):
        self.line = line
        super().__init__(f"line {line}: {reason}")


class UnresolvedGoldenChunks(RagnetError):
    exit_code = 2

    def __init__(self, offenders):
        self.offenders = offenders
        listing = ", ".join(f"{qid}:{cid}" for qid, cid in offenders)
        super().__init__(f"golden chunk ids not in corpus: {listing}")


class PaddingExhausted(RagnetError):
    pass
