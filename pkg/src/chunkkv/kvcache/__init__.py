from chunkkv.kvcache.allocator import (
    AllocatorError,
    CapacityError,
    Chunk,
    ChunkAllocator,
    acquire_chunk,
    release_chunk,
)
from chunkkv.kvcache.export import dump_dot, dump_text, parse_text
from chunkkv.kvcache.tree import (
    AttnContext,
    MemoryStats,
    PrefixTree,
    UnknownSequenceError,
    append_token,
    build_context,
    insert_sequence,
    memory_stats,
    remove_sequence,
)

__all__ = [
    "AllocatorError",
    "AttnContext",
    "CapacityError",
    "Chunk",
    "ChunkAllocator",
    "MemoryStats",
    "PrefixTree",
    "UnknownSequenceError",
    "acquire_chunk",
    "append_token",
    "build_context",
    "dump_dot",
    "dump_text",
    "insert_sequence",
    "memory_stats",
    "parse_text",
    "release_chunk",
    "remove_sequence",
]
