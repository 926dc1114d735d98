class TokenComError(Exception):
    pass


class ConfigurationError(TokenComError, ValueError):
    pass


class AgreementImpossible(TokenComError):
    """No tokenizer/de-tokenizer pair is shared by the BS and a user."""


class ProtocolError(TokenComError, ValueError):
    """Malformed agreement message; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ProtocolViolation(TokenComError):
    """Well-formed message that breaks the agreement protocol."""


class EpisodeFinished(TokenComError):
    pass


class BufferNotReady(TokenComError):
    pass


class EnumerationBoundExceeded(TokenComError, ValueError):
    pass
