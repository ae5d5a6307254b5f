"""Exception hierarchy shared by every stage of the toolkit."""


class ContentSepError(Exception):
    """Base class for all errors raised by contentsep."""


class EmptyAudio(ContentSepError):
    pass


class SilentAudio(ContentSepError):
    pass


class AudioTooShort(ContentSepError):
    pass


class UtteranceTooShort(ContentSepError):
    pass


class ConfigMismatch(ContentSepError):
    pass


class ConfigError(ContentSepError):
    pass


class EmptyInput(ContentSepError):
    pass


class MixedSpeakers(ContentSepError):
    pass


class DegenerateBatch(ContentSepError):
    pass


class DegenerateTrials(ContentSepError):
    pass


class DegenerateSequence(ContentSepError):
    pass


class DegenerateLabels(ContentSepError):
    pass


class DegenerateInput(ContentSepError):
    pass


class EmptyEmbedding(ContentSepError):
    pass


class ShapeError(ContentSepError, ValueError):
    pass


class MissingSpeaker(ContentSepError, KeyError):
    pass


class TieRisk(ContentSepError):
    pass


class ParseError(ContentSepError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DuplicateRecord(ContentSepError):
    pass


class AlreadyAugmented(ContentSepError):
    pass


class MissingArtifact(ContentSepError):
    def __init__(self, stage, detail=""):
        super().__init__(f"missing artifact for stage '{stage}'" + (f": {detail}" if detail else ""))
        self.stage = stage
