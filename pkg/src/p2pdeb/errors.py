"""Exception hierarchy shared by all p2pdeb modules."""


class P2PDebError(Exception):
    pass


# pcap_io
class PcapError(P2PDebError):
    pass


class UnknownMagic(PcapError):
    pass


class Truncated(PcapError):
    pass


class TruncatedRecord(PcapError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class OversizedRecord(PcapError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class InvariantViolation(PcapError):
    pass


# classify
class SignatureError(P2PDebError):
    pass


class SignatureSyntaxError(SignatureError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DuplicateId(SignatureError):
    pass


# bag_format
class BagError(P2PDebError):
    pass


class SealedBag(BagError):
    pass


class EmptySegment(BagError):
    pass


class MalformedContainer(BagError):
    pass


class PartSizeTooSmall(BagError):
    pass


class MissingPart(BagError):
    pass


class ContinuityMismatch(BagError):
    pass


class HeaderMismatch(BagError):
    pass


class PartCorrupted(BagError):
    pass


class VerificationFailed(BagError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# custody
class AuditError(P2PDebError):
    pass


# pipeline
class SourceFailure(P2PDebError):
    def __init__(self, message, summary=None):
        super().__init__(message)
        self.summary = summary


class WriterFailure(P2PDebError):
    pass
