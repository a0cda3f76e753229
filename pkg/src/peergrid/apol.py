"""Anonymous proof of location via peer-issued certificates.

A certificate authority (the energy company) installs a signing key pair in
every smart meter and records its true location.  A meter that wants to
prove its location without exposing that CA identity commits to a batch of
fresh key pairs in a Merkle tree, sends the root and its coarse location to
a randomly chosen peer meter, and receives back a certificate: the peer's
signature over hash(root, location).  Trades are then signed with one of
the committed leaf keys, and anyone can check the bundle in four steps:

1. the leaf key is included in the committed root,
2. the attached message signature verifies under the leaf key,
3. the certificate is the verifier's signature over hash(root, location),
4. the verifier's key is a genuine CA-registered meter.

The requester's CA-issued key never appears in the bundle, so observers and
the CA itself cannot tie trades back to it.
"""

from __future__ import annotations

import base64
import json
import secrets
import threading
import warnings
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .encoding import digest, encode_fields, encode_int

SIGNATURE_SCHEME = "ed25519"
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64

_LEAF_PREFIX = b"\x00"
_NODE_PREFIX = b"\x01"


class UnregisteredRequester(ValueError):
    """The CA does not vouch for the requesting key."""


class BadSignature(ValueError):
    pass


class LeafExhausted(UserWarning):
    """All committed leaf keys have been used; reuse weakens anonymity."""


def _rand_bytes(rng, n: int) -> bytes:
    if rng is None:
        return secrets.token_bytes(n)
    return rng.bytes(n)


def _new_keypair(rng=None) -> tuple[Ed25519PrivateKey, bytes]:
    private = Ed25519PrivateKey.from_private_bytes(_rand_bytes(rng, 32))
    public = private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return private, public


def _verify(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def generate_keypair(rng=None) -> tuple[Ed25519PrivateKey, bytes]:
    """Fresh signing key pair; seeded and reproducible when ``rng`` is given."""
    return _new_keypair(rng)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    """Deterministic signature check over raw bytes; False on any malformation."""
    return _verify(public_key, signature, message)


def quantize_location(bus: int, segment_size: int = 1) -> int:
    """Coarsen a bus id into a feeder-segment id.

    At the default bus resolution the location passes through unchanged;
    with ``segment_size`` > 1 buses are grouped into consecutive segments.
    """
    if segment_size <= 1:
        return bus
    return (bus - 1) // segment_size


@dataclass(frozen=True)
class MeterIdentity:
    """A smart meter's CA-issued key material and locations."""

    private_key: Ed25519PrivateKey
    public_key: bytes
    true_location: int
    sigma: int          # quantized (noisy) location

    def sign(self, message: bytes) -> bytes:
        return self.private_key.sign(message)


class CaRegistry:
    """Key-to-location registry kept by the energy company.

    Lookups by other parties only ever answer genuine / not genuine; the
    stored location is never exposed through the query interface.
    """

    def __init__(self) -> None:
        self._locations: dict[bytes, int] = {}
        self.issuance_log: list[str] = []
        self._lock = threading.Lock()

    def register(self, public_key: bytes, location: int) -> None:
        with self._lock:
            if public_key in self._locations:
                raise ValueError("key already registered")
            self._locations[public_key] = location
            self.issuance_log.append(public_key.hex())

    def is_genuine(self, public_key: bytes) -> bool:
        with self._lock:
            return public_key in self._locations

    def registered_keys(self) -> list[bytes]:
        with self._lock:
            return list(self._locations)

    def choose_verifier(self, rng, exclude: bytes) -> bytes:
        """Uniformly pick a registered meter other than the requester."""
        candidates = [pk for pk in self.registered_keys() if pk != exclude]
        if not candidates:
            raise ValueError("no eligible verifier registered")
        if rng is None:
            return secrets.choice(candidates)
        return candidates[int(rng.integers(0, len(candidates)))]


def install_meter(
    ca: CaRegistry,
    location: int,
    sigma_segment: int = 1,
    rng=None,
) -> MeterIdentity:
    """Deploy a fresh key pair in a meter and record it with the CA."""
    private, public = _new_keypair(rng)
    ca.register(public, location)
    return MeterIdentity(
        private_key=private,
        public_key=public,
        true_location=location,
        sigma=quantize_location(location, sigma_segment),
    )


# ---------------------------------------------------------------------------
# Merkle commitment over fresh trading keys
# ---------------------------------------------------------------------------


def _leaf_digest(public_key: bytes) -> bytes:
    return digest(_LEAF_PREFIX + public_key)


def _node_digest(left: bytes, right: bytes) -> bytes:
    return digest(_NODE_PREFIX + left + right)


@dataclass
class MerkleCommitment:
    """A batch of fresh key pairs committed under one root digest."""

    leaf_private_keys: list[Ed25519PrivateKey]
    leaf_public_keys: list[bytes]
    root: bytes
    paths: list[list[tuple[int, bytes]]]   # per leaf: (sibling side, sibling digest)
    used_leaves: set[int]

    @property
    def leaf_count(self) -> int:
        return len(self.leaf_public_keys)


def build_commitment(leaf_count: int, rng=None) -> MerkleCommitment:
    """Generate ``leaf_count`` fresh key pairs and commit to them.

    The leaf level is padded to a power of two by duplicating the last leaf
    digest; leaves hash with a distinct prefix from inner nodes so a path
    cannot be spliced across levels.
    """
    if leaf_count < 1:
        raise ValueError("need at least one leaf")
    keys = [_new_keypair(rng) for _ in range(leaf_count)]
    privates = [k[0] for k in keys]
    publics = [k[1] for k in keys]

    level = [_leaf_digest(pk) for pk in publics]
    while len(level) & (len(level) - 1):
        level.append(level[-1])

    paths: list[list[tuple[int, bytes]]] = [[] for _ in range(leaf_count)]
    positions = list(range(leaf_count))
    while len(level) > 1:
        next_level = []
        for pos in range(0, len(level), 2):
            next_level.append(_node_digest(level[pos], level[pos + 1]))
        for leaf, pos in enumerate(positions):
            sibling = pos ^ 1
            side = 0 if sibling < pos else 1   # 0: sibling is on the left
            paths[leaf].append((side, level[sibling]))
            positions[leaf] = pos // 2
        level = next_level

    return MerkleCommitment(
        leaf_private_keys=privates,
        leaf_public_keys=publics,
        root=level[0],
        paths=paths,
        used_leaves=set(),
    )


def verify_inclusion(public_key: bytes, path: list[tuple[int, bytes]], root: bytes) -> bool:
    """Recompute the root from a leaf key and its sibling path."""
    node = _leaf_digest(public_key)
    for side, sibling in path:
        if side == 0:
            node = _node_digest(sibling, node)
        else:
            node = _node_digest(node, sibling)
    return node == root


# ---------------------------------------------------------------------------
# Certificate request / issuance / attachment / verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoLRequest:
    """Certificate request: commitment root, noisy location, CA key, signature."""

    t_id: bytes
    merkle_root: bytes
    sigma: int
    public_key: bytes
    signature: bytes

    def content_bytes(self) -> bytes:
        return encode_fields([self.merkle_root, encode_int(self.sigma), self.public_key])

    def to_bytes(self) -> bytes:
        return encode_fields(
            [self.t_id, self.merkle_root, encode_int(self.sigma), self.public_key, self.signature]
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "t_id": base64.b64encode(self.t_id).decode(),
                "merkle_root": base64.b64encode(self.merkle_root).decode(),
                "sigma": self.sigma,
                "public_key": base64.b64encode(self.public_key).decode(),
                "signature": base64.b64encode(self.signature).decode(),
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class CoLResponse:
    """Verifier's reply: the certificate plus its own identity and signature."""

    certificate: bytes          # signature over hash(root, sigma)
    verifier_public_key: bytes
    signature: bytes            # signature over (certificate, verifier key)


@dataclass(frozen=True)
class CoLProof:
    """Everything a third party needs to check an anonymous location claim."""

    certificate: bytes
    verifier_public_key: bytes
    verifier_signature: bytes
    merkle_root: bytes
    sigma: int
    leaf_public_key: bytes
    leaf_path: tuple[tuple[int, bytes], ...]
    leaf_signature: bytes

    def to_bytes(self) -> bytes:
        path_bytes = encode_fields([bytes([side]) + sibling for side, sibling in self.leaf_path])
        return encode_fields(
            [
                self.certificate,
                self.verifier_public_key,
                self.verifier_signature,
                self.merkle_root,
                encode_int(self.sigma),
                self.leaf_public_key,
                path_bytes,
                self.leaf_signature,
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> CoLProof:
        from .encoding import decode_fields, decode_int

        fields = decode_fields(data)
        if len(fields) != 8:
            raise ValueError("malformed proof")
        path = []
        for entry in decode_fields(fields[6]):
            if not entry or entry[0] not in (0, 1):
                raise ValueError("malformed path entry")
            path.append((entry[0], entry[1:]))
        path = tuple(path)
        return cls(
            certificate=fields[0],
            verifier_public_key=fields[1],
            verifier_signature=fields[2],
            merkle_root=fields[3],
            sigma=decode_int(fields[4]),
            leaf_public_key=fields[5],
            leaf_path=path,
            leaf_signature=fields[7],
        )

    def to_json(self) -> str:
        b64 = lambda b: base64.b64encode(b).decode()
        return json.dumps(
            {
                "certificate": b64(self.certificate),
                "verifier_public_key": b64(self.verifier_public_key),
                "verifier_signature": b64(self.verifier_signature),
                "merkle_root": b64(self.merkle_root),
                "sigma": self.sigma,
                "leaf_public_key": b64(self.leaf_public_key),
                "leaf_path": [[side, b64(sib)] for side, sib in self.leaf_path],
                "leaf_signature": b64(self.leaf_signature),
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class ColVerification:
    accepted: bool
    failed_step: int | None = None
    reason: str = "ok"

    def __bool__(self) -> bool:
        return self.accepted


def certificate_payload(merkle_root: bytes, sigma: int) -> bytes:
    """The digest a verifier signs: hash over (root, noisy location)."""
    return digest(encode_fields([merkle_root, encode_int(sigma)]))


def request_col(meter: MeterIdentity, commitment: MerkleCommitment) -> CoLRequest:
    """Build a signed certificate request for a key commitment."""
    signature = meter.sign(
        encode_fields([commitment.root, encode_int(meter.sigma), meter.public_key])
    )
    t_id = digest(
        encode_fields(
            [commitment.root, encode_int(meter.sigma), meter.public_key, signature]
        )
    )
    return CoLRequest(
        t_id=t_id,
        merkle_root=commitment.root,
        sigma=meter.sigma,
        public_key=meter.public_key,
        signature=signature,
    )


def issue_col(verifier: MeterIdentity, request: CoLRequest, ca: CaRegistry) -> CoLResponse:
    """Verifier-side issuance: check the request, ask the CA, sign the certificate.

    The CA is only asked whether the requesting key is genuine; it never
    reveals the requester's location to the verifier.
    """
    expected_t_id = digest(
        encode_fields(
            [
                request.merkle_root,
                encode_int(request.sigma),
                request.public_key,
                request.signature,
            ]
        )
    )
    if expected_t_id != request.t_id:
        raise BadSignature("request id does not match its content")
    if not _verify(request.public_key, request.signature, request.content_bytes()):
        raise BadSignature("request signature invalid")
    if not ca.is_genuine(request.public_key):
        raise UnregisteredRequester(request.public_key.hex())

    certificate = verifier.sign(certificate_payload(request.merkle_root, request.sigma))
    response_signature = verifier.sign(
        encode_fields([certificate, verifier.public_key])
    )
    return CoLResponse(
        certificate=certificate,
        verifier_public_key=verifier.public_key,
        signature=response_signature,
    )


def attach_proof(
    commitment: MerkleCommitment,
    response: CoLResponse,
    sigma: int,
    leaf_index: int,
    message: bytes,
) -> CoLProof:
    """Sign ``message`` with a committed leaf key and bundle the full proof.

    Each attachment should use a fresh leaf; once every leaf has been used a
    :class:`LeafExhausted` warning is emitted and reuse proceeds (linking
    transactions through the repeated key weakens anonymity, nothing else).
    """
    if not 0 <= leaf_index < commitment.leaf_count:
        raise IndexError(f"leaf index {leaf_index} out of range")
    if len(commitment.used_leaves) >= commitment.leaf_count:
        warnings.warn(
            "all committed leaf keys have been used; reusing keys links transactions",
            LeafExhausted,
        )
    commitment.used_leaves.add(leaf_index)
    return CoLProof(
        certificate=response.certificate,
        verifier_public_key=response.verifier_public_key,
        verifier_signature=response.signature,
        merkle_root=commitment.root,
        sigma=sigma,
        leaf_public_key=commitment.leaf_public_keys[leaf_index],
        leaf_path=tuple(commitment.paths[leaf_index]),
        leaf_signature=commitment.leaf_private_keys[leaf_index].sign(message),
    )


def verify_col(proof: CoLProof, ca: CaRegistry, message: bytes) -> ColVerification:
    """Four-step check of an anonymous location proof.

    Returns the first failing step (1: leaf inclusion, 2: message signature,
    3: certificate signature, 4: verifier genuineness) or an acceptance.
    """
    if not verify_inclusion(proof.leaf_public_key, list(proof.leaf_path), proof.merkle_root):
        return ColVerification(False, 1, "leaf key not included in committed root")
    if not _verify(proof.leaf_public_key, proof.leaf_signature, message):
        return ColVerification(False, 2, "message signature invalid under leaf key")
    payload = certificate_payload(proof.merkle_root, proof.sigma)
    if not _verify(proof.verifier_public_key, proof.certificate, payload):
        return ColVerification(False, 3, "certificate does not bind root and location")
    if not _verify(
        proof.verifier_public_key,
        proof.verifier_signature,
        encode_fields([proof.certificate, proof.verifier_public_key]),
    ):
        return ColVerification(False, 3, "verifier response signature invalid")
    if not ca.is_genuine(proof.verifier_public_key):
        return ColVerification(False, 4, "verifier key not registered with the CA")
    return ColVerification(True)
