"""Transaction validation, the advertisement database and the block chain.

A trade leaves three transactions behind: the final negotiation record (EN),
the consumer's conditional payment (LP) and the producer meter's injection
report (EI).  LP and EI form an atomic pair: the payment only happens, and
the pair only reaches a block, if a matching EI arrives before the LP
expires.  Under-delivery routes through the dispute contract, which prorates
the price and docks the producer's reputation; nothing else may write
reputation.  Advertisements normally live off-chain in a database writable
only by the grid operator, which keeps the chain size independent of
advertisement volume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import apol
from .encoding import (
    decode_fields,
    digest,
    encode_fields,
    encode_float,
    encode_int,
)

GENESIS_DIGEST = bytes(32)
GRID_OPERATOR = "grid-operator"


class InvalidCoL(ValueError):
    pass


class UnauthorizedWriter(PermissionError):
    pass


class MissingAgreement(ValueError):
    pass


class UnknownReference(KeyError):
    pass


class Expired(ValueError):
    pass


class DuplicateEI(ValueError):
    pass


class NotUnderDelivery(ValueError):
    pass


class UnauthorizedSource(PermissionError):
    pass


class NothingPending(ValueError):
    pass


class InsufficientFunds(ValueError):
    pass


class AlreadySettled(ValueError):
    pass


BadSignature = apol.BadSignature


def price_cents(price_per_kwh: float, amount_kwh: float) -> int:
    """Total payment for a trade, in whole cents."""
    return int(round(price_per_kwh * amount_kwh))


# ---------------------------------------------------------------------------
# Transaction types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdvertisementTx:
    """Offer or ask published before negotiation (kind 'offer' carries a
    price, kind 'ask' carries a requested amount)."""

    TYPE = "AT"

    t_id: bytes
    kind: str                       # "offer" | "ask"
    value: float                    # price ¢/kWh for offers, amount kWh for asks
    reputation: float
    col_proof: apol.CoLProof | None

    @staticmethod
    def content_bytes(kind: str, value: float, reputation: float) -> bytes:
        return encode_fields([kind.encode(), encode_float(value), encode_float(reputation)])

    @classmethod
    def create(
        cls, kind: str, value: float, reputation: float, col_proof: apol.CoLProof | None
    ) -> AdvertisementTx:
        if kind not in ("offer", "ask"):
            raise ValueError("kind must be 'offer' or 'ask'")
        content = cls.content_bytes(kind, value, reputation)
        proof_bytes = col_proof.to_bytes() if col_proof else b""
        return cls(
            t_id=digest(encode_fields([content, proof_bytes])),
            kind=kind,
            value=value,
            reputation=reputation,
            col_proof=col_proof,
        )

    def to_bytes(self) -> bytes:
        return encode_fields(
            [
                self.TYPE.encode(),
                self.t_id,
                self.kind.encode(),
                encode_float(self.value),
                encode_float(self.reputation),
                self.col_proof.to_bytes() if self.col_proof else b"",
            ]
        )

    @property
    def sigma(self) -> int | None:
        return self.col_proof.sigma if self.col_proof else None


@dataclass(frozen=True)
class EnergyNegotiationTx:
    """Final agreed trade conditions, countersigned by both sides.

    The consumer generates the transaction, so the generator key is the
    consumer's and the destination key is the producer's.
    """

    TYPE = "EN"

    t_id: bytes
    amount: float                  # kWh
    price: float                   # ¢/kWh
    destination_pk: bytes
    destination_sig: bytes
    generator_pk: bytes
    generator_sig: bytes
    agreement_producer: bool
    agreement_consumer: bool
    nonce: int = 0                 # disambiguates identical terms across intervals

    @staticmethod
    def core_bytes(
        amount: float,
        price: float,
        destination_pk: bytes,
        generator_pk: bytes,
        agreement_producer: bool,
        agreement_consumer: bool,
        nonce: int = 0,
    ) -> bytes:
        return encode_fields(
            [
                encode_float(amount),
                encode_float(price),
                destination_pk,
                generator_pk,
                bytes([int(agreement_producer), int(agreement_consumer)]),
                encode_int(nonce),
            ]
        )

    @classmethod
    def create(
        cls,
        amount: float,
        price: float,
        producer_key,
        producer_pk: bytes,
        consumer_key,
        consumer_pk: bytes,
        agreement_producer: bool = True,
        agreement_consumer: bool = True,
        nonce: int = 0,
    ) -> EnergyNegotiationTx:
        core = cls.core_bytes(
            amount, price, producer_pk, consumer_pk, agreement_producer, agreement_consumer, nonce
        )
        destination_sig = producer_key.sign(core)
        generator_sig = consumer_key.sign(core)
        return cls(
            t_id=digest(encode_fields([core, destination_sig, generator_sig])),
            amount=amount,
            price=price,
            destination_pk=producer_pk,
            destination_sig=destination_sig,
            generator_pk=consumer_pk,
            generator_sig=generator_sig,
            agreement_producer=agreement_producer,
            agreement_consumer=agreement_consumer,
            nonce=nonce,
        )

    def core(self) -> bytes:
        return self.core_bytes(
            self.amount,
            self.price,
            self.destination_pk,
            self.generator_pk,
            self.agreement_producer,
            self.agreement_consumer,
            self.nonce,
        )

    def to_bytes(self) -> bytes:
        return encode_fields(
            [
                self.TYPE.encode(),
                self.t_id,
                encode_float(self.amount),
                encode_float(self.price),
                self.destination_pk,
                self.destination_sig,
                self.generator_pk,
                self.generator_sig,
                bytes([int(self.agreement_producer), int(self.agreement_consumer)]),
                encode_int(self.nonce),
            ]
        )


@dataclass(frozen=True)
class LatePaymentTx:
    """Conditional payment: valid only when paired with a matching EI before expiry."""

    TYPE = "LP"

    t_id: bytes
    price: int                     # total cents
    input_account: str             # funding account (hex address)
    output_account: str            # producer address from the final EN
    en_ref: bytes
    expiry_tick: int
    signature: bytes

    @staticmethod
    def core_bytes(
        price: int, input_account: str, output_account: str, en_ref: bytes, expiry_tick: int
    ) -> bytes:
        return encode_fields(
            [
                encode_int(price),
                input_account.encode(),
                output_account.encode(),
                en_ref,
                encode_int(expiry_tick),
            ]
        )

    @classmethod
    def create(
        cls,
        price: int,
        input_account: str,
        output_account: str,
        en_ref: bytes,
        expiry_tick: int,
        signer_key,
    ) -> LatePaymentTx:
        core = cls.core_bytes(price, input_account, output_account, en_ref, expiry_tick)
        signature = signer_key.sign(core)
        return cls(
            t_id=digest(encode_fields([core, signature])),
            price=price,
            input_account=input_account,
            output_account=output_account,
            en_ref=en_ref,
            expiry_tick=expiry_tick,
            signature=signature,
        )

    def core(self) -> bytes:
        return self.core_bytes(
            self.price, self.input_account, self.output_account, self.en_ref, self.expiry_tick
        )

    def to_bytes(self) -> bytes:
        return encode_fields(
            [
                self.TYPE.encode(),
                self.t_id,
                encode_int(self.price),
                self.input_account.encode(),
                self.output_account.encode(),
                self.en_ref,
                encode_int(self.expiry_tick),
                self.signature,
            ]
        )


@dataclass(frozen=True)
class EnergyInjectionTx:
    """Meter-generated delivery report; a two-of-two multisig transaction."""

    TYPE = "EI"

    amount: float                  # kWh actually injected
    lp_id: bytes
    producer_pk: bytes
    producer_sig: bytes
    consumer_pk: bytes
    consumer_sig: bytes

    @staticmethod
    def core_bytes(amount: float, lp_id: bytes) -> bytes:
        return encode_fields([encode_float(amount), lp_id])

    @classmethod
    def create(
        cls,
        amount: float,
        lp_id: bytes,
        producer_key,
        producer_pk: bytes,
        consumer_key,
        consumer_pk: bytes,
    ) -> EnergyInjectionTx:
        core = cls.core_bytes(amount, lp_id)
        return cls(
            amount=amount,
            lp_id=lp_id,
            producer_pk=producer_pk,
            producer_sig=producer_key.sign(core),
            consumer_pk=consumer_pk,
            consumer_sig=consumer_key.sign(core),
        )

    def core(self) -> bytes:
        return self.core_bytes(self.amount, self.lp_id)

    @property
    def t_id(self) -> bytes:
        return digest(self.to_bytes())

    def to_bytes(self) -> bytes:
        return encode_fields(
            [
                self.TYPE.encode(),
                encode_float(self.amount),
                self.lp_id,
                self.producer_pk,
                self.producer_sig,
                self.consumer_pk,
                self.consumer_sig,
            ]
        )


@dataclass(frozen=True)
class PriceUpdateTx:
    """Dispute outcome: the payment for an LP is prorated to delivery."""

    TYPE = "PU"

    lp_id: bytes
    old_price: int
    new_price: int

    @property
    def t_id(self) -> bytes:
        return digest(self.to_bytes())

    def to_bytes(self) -> bytes:
        return encode_fields(
            [self.TYPE.encode(), self.lp_id, encode_int(self.old_price), encode_int(self.new_price)]
        )


@dataclass(frozen=True)
class ReputationTx:
    """On-chain record of a reputation write by the dispute contract."""

    TYPE = "REP"

    agent: str
    old_value: float
    new_value: float
    source: str

    @property
    def t_id(self) -> bytes:
        return digest(self.to_bytes())

    def to_bytes(self) -> bytes:
        return encode_fields(
            [
                self.TYPE.encode(),
                self.agent.encode(),
                encode_float(self.old_value),
                encode_float(self.new_value),
                self.source.encode(),
            ]
        )


Transaction = (
    AdvertisementTx
    | EnergyNegotiationTx
    | LatePaymentTx
    | EnergyInjectionTx
    | PriceUpdateTx
    | ReputationTx
)


@dataclass(frozen=True)
class Block:
    index: int
    prev_digest: bytes
    transactions: tuple[Transaction, ...]
    digest: bytes                  # sealed at creation; never recomputed in place

    def to_bytes(self) -> bytes:
        return encode_fields(
            [encode_int(self.index), self.prev_digest]
            + [tx.to_bytes() for tx in self.transactions]
        )

    @classmethod
    def seal(cls, index: int, prev_digest: bytes, transactions: tuple) -> Block:
        draft = cls(index=index, prev_digest=prev_digest, transactions=transactions, digest=b"")
        return cls(
            index=index,
            prev_digest=prev_digest,
            transactions=transactions,
            digest=digest(draft.to_bytes()),
        )


# ---------------------------------------------------------------------------
# Advertisement database (off-chain)
# ---------------------------------------------------------------------------


class AdvertisementStore:
    """Read-only-for-everyone store of advertisements, written by the operator."""

    def __init__(self) -> None:
        self._ads: list[AdvertisementTx] = []

    def add(self, at: AdvertisementTx) -> str:
        self._ads.append(at)
        return at.t_id.hex()

    def __len__(self) -> int:
        return len(self._ads)

    def total_bytes(self) -> int:
        return sum(len(at.to_bytes()) for at in self._ads)

    def query(
        self,
        kind: str | None = None,
        min_value: float | None = None,
        max_value: float | None = None,
        sigma: int | None = None,
        sigma_radius: int = 0,
    ) -> list[AdvertisementTx]:
        """Filter ads by kind, value range and noisy-location proximity."""
        out = []
        for at in self._ads:
            if kind is not None and at.kind != kind:
                continue
            if min_value is not None and at.value < min_value:
                continue
            if max_value is not None and at.value > max_value:
                continue
            if sigma is not None:
                if at.sigma is None or abs(at.sigma - sigma) > sigma_radius:
                    continue
            out.append(at)
        return out

    def clear(self) -> None:
        self._ads.clear()


# ---------------------------------------------------------------------------
# The ledger state machine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TradeValidation:
    """Outcome of pairing an EI against its LP."""

    status: str                    # "accepted" | "dispute" | "discarded"
    lp_id: bytes
    detail: str = ""
    price_update: PriceUpdateTx | None = None
    reputation_delta: float = 0.0


@dataclass(frozen=True)
class DisputeResult:
    price_update: PriceUpdateTx
    reputation_delta: float
    new_reputation: float


@dataclass
class _LpChain:
    lp: LatePaymentTx
    status: str = "pending"        # pending | disputed | settled | discarded
    injection: EnergyInjectionTx | None = None
    price_update: PriceUpdateTx | None = None


@dataclass(frozen=True)
class FootprintReport:
    block_count: int
    total_bytes: int
    per_type: dict[str, dict[str, int]]
    ad_count: int
    ad_bytes: int
    hash_name: str = "sha256"
    signature_scheme: str = apol.SIGNATURE_SCHEME


class Ledger:
    """Single-validator append-only chain plus the off-chain ad database.

    All submissions funnel through one writer; sealed blocks and the ad
    store are safe to read concurrently.  Consumers hold integer-cent
    balances that fund LP payments.
    """

    REPUTATION_PENALTY = 0.5       # scaled by the undelivered fraction

    def __init__(
        self,
        ca: apol.CaRegistry | None = None,
        ad_mode: bool = True,
        block_size: int = 10,
        lp_expiry_ticks: int = 10,
    ) -> None:
        self.ca = ca
        self.ad_mode = ad_mode
        self.block_size = block_size
        self.lp_expiry_ticks = lp_expiry_ticks
        self.blocks: list[Block] = []
        self.pending: list[Transaction] = []
        self.ad = AdvertisementStore()
        self.reputation: dict[str, float] = {}
        self.balances: dict[str, int] = {}
        self.dr_address = digest(b"dispute-resolution-contract").hex()
        self._negotiations: dict[bytes, EnergyNegotiationTx] = {}
        self._chains: dict[bytes, _LpChain] = {}          # lp id -> chain state
        self._chain_by_en: dict[bytes, bytes] = {}        # en id -> lp id

    # -- funding and reputation registration --------------------------------

    def fund(self, account: str, cents: int) -> None:
        self.balances[account] = self.balances.get(account, 0) + int(cents)

    def register_agent(self, address: str, reputation: float = 1.0) -> None:
        if not 0.0 <= reputation <= 1.0:
            raise ValueError("reputation must lie in [0, 1]")
        self.reputation[address] = reputation

    # -- advertisement -------------------------------------------------------

    def submit_advertisement(self, at: AdvertisementTx, submitted_by: str) -> str:
        """Store an advertisement; only the grid operator may write."""
        if submitted_by != GRID_OPERATOR:
            raise UnauthorizedWriter(submitted_by)
        if at.col_proof is None:
            raise InvalidCoL("advertisement carries no location proof")
        if self.ca is None:
            raise InvalidCoL("ledger has no certificate authority configured")
        content = AdvertisementTx.content_bytes(at.kind, at.value, at.reputation)
        verdict = apol.verify_col(at.col_proof, self.ca, content)
        if not verdict:
            raise InvalidCoL(f"step {verdict.failed_step}: {verdict.reason}")
        ad_id = self.ad.add(at)
        if not self.ad_mode:
            self.pending.append(at)
        return ad_id

    # -- negotiation ---------------------------------------------------------

    def finalize_negotiation(self, en: EnergyNegotiationTx) -> bytes:
        """Accept the final countersigned EN into the pending pool."""
        if not (en.agreement_producer and en.agreement_consumer):
            raise MissingAgreement("both agreement flags must be set")
        core = en.core()
        if not apol.verify_signature(en.destination_pk, en.destination_sig, core):
            raise BadSignature("destination signature invalid")
        if not apol.verify_signature(en.generator_pk, en.generator_sig, core):
            raise BadSignature("generator signature invalid")
        self._negotiations[en.t_id] = en
        self.pending.append(en)
        return en.t_id

    # -- atomic trading ------------------------------------------------------

    def submit_lp(self, lp: LatePaymentTx, now: int) -> bytes:
        """Register a conditional payment awaiting its matching EI."""
        en = self._negotiations.get(lp.en_ref)
        if en is None:
            raise UnknownReference("LP references an unknown EN")
        if now > lp.expiry_tick:
            raise Expired("LP submitted past its own expiry")
        if not apol.verify_signature(en.generator_pk, lp.signature, lp.core()):
            raise BadSignature("LP signature does not match the EN consumer key")
        if lp.output_account != en.destination_pk.hex():
            raise BadSignature("LP output is not the EN producer address")

        existing_id = self._chain_by_en.get(lp.en_ref)
        if existing_id is not None:
            chain = self._chains[existing_id]
            if chain.status == "disputed":
                return self._settle_dispute_replacement(chain, lp)
            if chain.status in ("pending", "settled"):
                raise AlreadySettled("this EN already has an active payment chain")
            # discarded chains may be retried with a fresh LP

        if self.balances.get(lp.input_account, 0) < lp.price:
            raise InsufficientFunds(lp.input_account)
        self._chains[lp.t_id] = _LpChain(lp=lp)
        self._chain_by_en[lp.en_ref] = lp.t_id
        return lp.t_id

    def submit_ei(self, ei: EnergyInjectionTx, now: int) -> TradeValidation:
        """Pair an injection report with its LP and validate the whole chain.

        Full match seals both and pays the producer; under-delivery invokes
        the dispute contract; a price mismatch discards the pair.
        """
        chain = self._chains.get(ei.lp_id)
        if chain is None:
            raise UnknownReference("EI references an unknown LP")
        if chain.status in ("settled", "disputed"):
            raise DuplicateEI("an EI was already accepted for this LP")
        if chain.status == "discarded":
            raise UnknownReference("the referenced LP was discarded")
        lp = chain.lp
        if now > lp.expiry_tick:
            chain.status = "discarded"
            raise Expired("EI arrived after the LP expiry")

        en = self._negotiations[lp.en_ref]
        core = ei.core()
        if ei.producer_pk != en.destination_pk or ei.consumer_pk != en.generator_pk:
            raise BadSignature("EI keys do not match the EN parties")
        if not apol.verify_signature(ei.producer_pk, ei.producer_sig, core):
            raise BadSignature("producer signature invalid")
        if not apol.verify_signature(ei.consumer_pk, ei.consumer_sig, core):
            raise BadSignature("consumer signature invalid")

        agreed_price = price_cents(en.price, en.amount)
        if lp.price != agreed_price:
            chain.status = "discarded"
            return TradeValidation(
                status="discarded",
                lp_id=lp.t_id,
                detail="price differs between LP and EN; both discarded",
            )
        if ei.amount > en.amount + 1e-9:
            chain.status = "discarded"
            return TradeValidation(
                status="discarded",
                lp_id=lp.t_id,
                detail="reported injection exceeds the agreed amount",
            )

        if ei.amount >= en.amount - 1e-9:
            chain.status = "settled"
            chain.injection = ei
            self._transfer(lp, lp.price)
            self.pending.append(lp)
            self.pending.append(ei)
            return TradeValidation(status="accepted", lp_id=lp.t_id)

        # Under-delivery: the dispute contract prorates the price and docks
        # the producer; the consumer is expected to resubmit at the new price.
        result = self.dispute_resolution(ei, lp, en)
        chain.status = "disputed"
        chain.injection = ei
        chain.price_update = result.price_update
        self.pending.append(result.price_update)
        return TradeValidation(
            status="dispute",
            lp_id=lp.t_id,
            detail="under-delivery; awaiting replacement LP at the updated price",
            price_update=result.price_update,
            reputation_delta=result.reputation_delta,
        )

    def _settle_dispute_replacement(self, chain: _LpChain, lp: LatePaymentTx) -> bytes:
        assert chain.price_update is not None and chain.injection is not None
        if lp.price != chain.price_update.new_price:
            raise BadSignature("replacement LP must carry the dispute price")
        if self.balances.get(lp.input_account, 0) < lp.price:
            raise InsufficientFunds(lp.input_account)
        chain.status = "settled"
        old_lp_id = chain.lp.t_id
        chain.lp = lp
        self._chains[lp.t_id] = chain
        self._chains.pop(old_lp_id, None)
        self._chain_by_en[lp.en_ref] = lp.t_id
        self._transfer(lp, lp.price)
        self.pending.append(lp)
        self.pending.append(chain.injection)
        return lp.t_id

    def _transfer(self, lp: LatePaymentTx, cents: int) -> None:
        self.balances[lp.input_account] = self.balances.get(lp.input_account, 0) - cents
        self.balances[lp.output_account] = self.balances.get(lp.output_account, 0) + cents

    # -- dispute resolution and reputation ------------------------------------

    def dispute_resolution(
        self, ei: EnergyInjectionTx, lp: LatePaymentTx, en: EnergyNegotiationTx
    ) -> DisputeResult:
        """Prorate the price to the delivered fraction and dock reputation."""
        if ei.amount >= en.amount - 1e-9:
            raise NotUnderDelivery("delivered amount covers the agreement")
        fraction = max(0.0, ei.amount / en.amount)
        pu = PriceUpdateTx(
            lp_id=lp.t_id,
            old_price=lp.price,
            new_price=int(round(lp.price * fraction)),
        )
        delta = -self.REPUTATION_PENALTY * (1.0 - fraction)
        new_value = self.update_reputation(lp.output_account, delta, self.dr_address)
        return DisputeResult(price_update=pu, reputation_delta=delta, new_reputation=new_value)

    def update_reputation(self, agent: str, delta: float, source: str) -> float:
        """Apply a reputation write; only the dispute contract address may."""
        if source != self.dr_address:
            raise UnauthorizedSource(source)
        if delta > 0:
            raise ValueError("reputation only ever decreases")
        old = self.reputation.get(agent, 1.0)
        new = min(1.0, max(0.0, old + delta))
        self.reputation[agent] = new
        self.pending.append(
            ReputationTx(agent=agent, old_value=old, new_value=new, source=source)
        )
        return new

    # -- blocks ---------------------------------------------------------------

    def append_block(self) -> int:
        """Seal up to ``block_size`` pending transactions into the next block."""
        if not self.pending:
            raise NothingPending("no validated transactions waiting")
        batch = tuple(self.pending[: self.block_size])
        del self.pending[: self.block_size]
        prev = self.blocks[-1].digest if self.blocks else GENESIS_DIGEST
        block = Block.seal(index=len(self.blocks), prev_digest=prev, transactions=batch)
        self.blocks.append(block)
        return block.index

    def seal_all(self) -> int:
        """Seal every pending transaction; returns the number of new blocks."""
        count = 0
        while self.pending:
            self.append_block()
            count += 1
        return count

    def verify_chain(self) -> bool:
        """Recompute every block digest and link; False if anything was touched."""
        prev = GENESIS_DIGEST
        for i, block in enumerate(self.blocks):
            if block.index != i or block.prev_digest != prev:
                return False
            if digest(block.to_bytes()) != block.digest:
                return False
            prev = block.digest
        return True

    def head_digest(self) -> bytes:
        return self.blocks[-1].digest if self.blocks else GENESIS_DIGEST

    def sealed_transactions(self) -> list[Transaction]:
        return [tx for block in self.blocks for tx in block.transactions]

    # -- metrics and export ----------------------------------------------------

    def measure_footprint(self) -> FootprintReport:
        """Byte sizes of the sealed chain, per transaction type, plus the AD."""
        per_type: dict[str, dict[str, int]] = {}
        total = 0
        for block in self.blocks:
            total += len(block.to_bytes())
            for tx in block.transactions:
                entry = per_type.setdefault(tx.TYPE, {"count": 0, "bytes": 0})
                entry["count"] += 1
                entry["bytes"] += len(tx.to_bytes())
        return FootprintReport(
            block_count=len(self.blocks),
            total_bytes=total,
            per_type=per_type,
            ad_count=len(self.ad),
            ad_bytes=self.ad.total_bytes(),
        )

    def export_jsonl(self) -> str:
        """Line-delimited JSON dump: block markers followed by their txs."""
        lines = []
        for block in self.blocks:
            lines.append(
                json.dumps(
                    {
                        "block": block.index,
                        "digest": block.digest.hex(),
                        "prev": block.prev_digest.hex(),
                        "tx_count": len(block.transactions),
                    },
                    sort_keys=True,
                )
            )
            for tx in block.transactions:
                lines.append(json.dumps(_tx_json(block.index, tx), sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")


def _tx_json(block_index: int, tx: Transaction) -> dict:
    out: dict = {"block": block_index, "type": tx.TYPE}
    if isinstance(tx, AdvertisementTx):
        out.update(
            t_id=tx.t_id.hex(),
            kind=tx.kind,
            value=tx.value,
            reputation=tx.reputation,
            sigma=tx.sigma,
            col_bytes=len(tx.col_proof.to_bytes()) if tx.col_proof else 0,
        )
    elif isinstance(tx, EnergyNegotiationTx):
        out.update(
            t_id=tx.t_id.hex(),
            amount=tx.amount,
            price=tx.price,
            producer=tx.destination_pk.hex(),
            consumer=tx.generator_pk.hex(),
        )
    elif isinstance(tx, LatePaymentTx):
        out.update(
            t_id=tx.t_id.hex(),
            price=tx.price,
            input=tx.input_account,
            output=tx.output_account,
            en_ref=tx.en_ref.hex(),
            expiry=tx.expiry_tick,
        )
    elif isinstance(tx, EnergyInjectionTx):
        out.update(
            t_id=tx.t_id.hex(),
            amount=tx.amount,
            lp_id=tx.lp_id.hex(),
            producer=tx.producer_pk.hex(),
            consumer=tx.consumer_pk.hex(),
        )
    elif isinstance(tx, PriceUpdateTx):
        out.update(
            lp_id=tx.lp_id.hex(), old_price=tx.old_price, new_price=tx.new_price
        )
    elif isinstance(tx, ReputationTx):
        out.update(
            agent=tx.agent, old=tx.old_value, new=tx.new_value, source=tx.source
        )
    return out
