"""Exception hierarchy shared across the package."""


class GracybusError(Exception):
    pass


# crypto
class CryptoError(GracybusError):
    pass


class EmptySecret(CryptoError):
    pass


class EmptySeed(CryptoError):
    pass


class BadKeyLength(CryptoError):
    pass


class BadKey(CryptoError):
    pass


class DecryptionFailure(CryptoError):
    pass


class UnknownSuite(CryptoError):
    pass


# pki
class EmptyIdentity(GracybusError):
    pass


# tree
class TreeError(GracybusError):
    pass


class NotALeaf(TreeError):
    pass


class NotFull(TreeError):
    pass


class SameLeaf(TreeError):
    pass


class BadIndex(TreeError):
    pass


# wire
class WireError(GracybusError):
    pass


class Truncated(WireError):
    pass


class BadVersion(WireError):
    pass


class UnknownType(WireError):
    pass


class LengthMismatch(WireError):
    pass


class Malformed(WireError):
    pass


class AuthFailure(WireError):
    pass


class EpochMismatch(WireError):
    pass


class MissingCredential(WireError):
    pass


# engine
class EngineError(GracybusError):
    pass


class NotInGroup(EngineError):
    pass


class BadCertificate(EngineError):
    pass


class NonceMismatch(EngineError):
    pass


class NoDecryptableCiphertext(EngineError):
    pass


class InconsistentTree(EngineError):
    pass


# simulator / harness
class SimError(GracybusError):
    pass


class DuplicateAttach(SimError):
    pass


class StepLimitExceeded(SimError):
    pass


class BadScript(SimError):
    pass


class ParseError(GracybusError):
    pass


class UnknownDevice(GracybusError):
    pass
