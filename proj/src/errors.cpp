#include "cloudlet/error.hpp"

namespace cloudlet {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::Ok: return "ok";
    case Errc::StorageFull: return "storage_full";
    case Errc::LogClosed: return "log_closed";
    case Errc::OffsetOutOfRange: return "offset_out_of_range";
    case Errc::CorruptRecord: return "corrupt_record";
    case Errc::UnrecoverableLog: return "unrecoverable_log";
    case Errc::TopicExists: return "topic_exists";
    case Errc::InvalidConfig: return "invalid_config";
    case Errc::InsufficientBrokers: return "insufficient_brokers";
    case Errc::UnknownTopic: return "unknown_topic";
    case Errc::UnknownTopicOrPartition: return "unknown_topic_or_partition";
    case Errc::NotLeader: return "not_leader";
    case Errc::RequestTimeout: return "request_timeout";
    case Errc::FencedEpoch: return "fenced_epoch";
    case Errc::NoViableLeader: return "no_viable_leader";
    case Errc::DataDirLocked: return "data_dir_locked";
    case Errc::BindFailed: return "bind_failed";
    case Errc::MessageTooLarge: return "message_too_large";
    case Errc::DecodeError: return "decode_error";
    case Errc::UnknownSeries: return "unknown_series";
    case Errc::ConfigError: return "config_error";
    case Errc::ScenarioError: return "scenario_error";
    case Errc::Unavailable: return "unavailable";
    case Errc::Io: return "io_error";
    case Errc::Malformed: return "malformed";
  }
  return "unknown";
}

}  // namespace cloudlet
