"""The .PcRecord storage format."""
from pcpipe.record.dataset import (
    DatasetReader,
    describe_dataset,
    FileHeader,
    GroupDescriptor,
    iter_samples,
    open_dataset,
    read_header,
    read_sample,
    sample_equal,
    write_dataset,
)
from pcpipe.record.pages import (
    ColumnSpec,
    EncodedPage,
    decode_block_page,
    encode_block_page,
    xor_delta_decode,
    xor_delta_encode,
)
from pcpipe.record.schema import FieldType, Schema, conform, validate_schema
