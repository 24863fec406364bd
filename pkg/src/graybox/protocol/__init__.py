"""Wire protocol, server and remote client for the sealed vault."""
from graybox.protocol.client import RemoteSession, RemoteVaultClient, remote_client
from graybox.protocol.ledger import ExposureLedger, ExposureReport, LedgerEntry, audit_ledger, schema_weight_fields
from graybox.protocol.server import ServerLimits, VaultServer, parse_addr, serve
from graybox.protocol.wire import ErrorCode, Message, MsgType, ProtocolError, RemoteError, decode, encode

__all__ = [
    "ErrorCode", "ExposureLedger", "ExposureReport", "LedgerEntry", "Message", "MsgType", "ProtocolError",
    "RemoteError", "RemoteSession", "RemoteVaultClient", "ServerLimits", "VaultServer", "audit_ledger",
    "decode", "encode", "parse_addr", "remote_client", "schema_weight_fields", "serve",
]
