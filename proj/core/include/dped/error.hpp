#pragma once

#include <stdexcept>
#include <string>

namespace dped {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define DPED_DEFINE_ERROR(Name)            \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  };

DPED_DEFINE_ERROR(IoError)
DPED_DEFINE_ERROR(DecodeError)
DPED_DEFINE_ERROR(InvalidSpec)
DPED_DEFINE_ERROR(InvalidSize)
DPED_DEFINE_ERROR(KernelTooLarge)
DPED_DEFINE_ERROR(ShapeError)
DPED_DEFINE_ERROR(ImageTooSmall)
DPED_DEFINE_ERROR(DegenerateConfiguration)
DPED_DEFINE_ERROR(EmptyIntersection)
DPED_DEFINE_ERROR(SchemaError)
DPED_DEFINE_ERROR(UnknownLayer)
DPED_DEFINE_ERROR(StaleTape)
DPED_DEFINE_ERROR(NonFiniteComponent)
DPED_DEFINE_ERROR(NonFiniteGradient)
DPED_DEFINE_ERROR(NonFiniteLoss)
DPED_DEFINE_ERROR(EmptyDataset)
DPED_DEFINE_ERROR(EmptyCorpus)

#undef DPED_DEFINE_ERROR

}  // namespace dped
