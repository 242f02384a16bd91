"""Private search and anonymous conversations among journalists.

Modules, bottom up:

    crypto      prime-order group, hashing, authenticated encryption
    mspsi       multi-set PSI over published per-document tags
    cuckoo      cuckoo filter used to compress tag collections
    tokens      blind-signed one-time tokens that rate-limit broadcasts
    wire        length-prefixed binary frames
    pigeonhole  bulletin board and one-time mailbox server
    clock       virtual and wall-clock schedulers
    messaging   envelopes, receive processes and Poisson cover traffic
    node        a journalist's node tying it all together
    leakage     corpus-extraction attacks against search oracles
    simbench    benchmarks and simulations
"""
__version__ = "0.1.0"
